use std::sync::Arc;

use bsac_core::agent::{Agent, AgentError, LossReport, ReplayBuffer, TrainConfig, TrainObserver, Transition};
use bsac_core::bsn::preset;
use bsac_core::checks::single_node_equivalence;
use bsac_core::envs::make_env;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small(env: &str, topology: &str) -> TrainConfig {
    TrainConfig {
        env: env.into(),
        topology: topology.into(),
        total_steps: 260,
        start_steps: 200,
        batch_size: 16,
        hidden_units: 8,
        eval_interval: 1000,
        eval_episodes: 1,
        ..TrainConfig::default()
    }
}

fn build(config: TrainConfig) -> Agent {
    let env = make_env(&config.env).unwrap();
    let graph = Arc::new(preset(&config.topology, env.spec().action_dim).unwrap());
    Agent::new(config, graph, env.spec()).unwrap()
}

#[derive(Default)]
struct Snapshots(Vec<Agent>);

impl TrainObserver for Snapshots {
    fn on_step(&mut self, env_step: u64, agent: &Agent) -> Result<(), AgentError> {
        if env_step > agent.config().start_steps {
            self.0.push(agent.clone());
        }
        Ok(())
    }
}

fn train(agent: &mut Agent, observer: &mut dyn TrainObserver) {
    let mut env = make_env(&agent.config().env).unwrap();
    let mut eval = make_env(&agent.config().env).unwrap();
    agent.train(env.as_mut(), eval.as_mut(), observer).unwrap();
}

#[test]
fn zero_learning_rates_freeze_every_network() {
    let cfg = TrainConfig {
        lr_v: 0.0,
        lr_q: 0.0,
        lr_pi: 0.0,
        ..small("chain-lqr-3", "hopper-chain")
    };
    let mut agent = build(cfg);
    let (policies, critics) = (agent.policies.clone(), agent.critics.clone());
    train(&mut agent, &mut ());
    assert_eq!(agent.updates(), 60);
    assert_eq!(agent.policies, policies);
    assert_eq!((&agent.critics.v, &agent.critics.q1, &agent.critics.q2), (&critics.v, &critics.q1, &critics.q2));
    // τv + (1 − τ)v reproduces v up to rounding.
    for (a, b) in agent.critics.v_target.to_flat().iter().zip(critics.v.to_flat()) {
        assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
    }
}

#[test]
fn unit_tau_copies_the_value_network() {
    let cfg = TrainConfig {
        tau: 1.0,
        ..small("pendulum", "single")
    };
    let mut agent = build(cfg);
    let mut seen = Snapshots::default();
    train(&mut agent, &mut seen);
    assert_eq!(seen.0.len(), 60);
    for a in &seen.0 {
        assert_eq!(a.critics.v_target, a.critics.v);
    }
}

#[test]
fn gradient_steps_multiply_updates() {
    let cfg = TrainConfig {
        gradient_steps: 3,
        ..small("pendulum", "single")
    };
    let mut agent = build(cfg);
    train(&mut agent, &mut ());
    assert_eq!(agent.updates(), 180);
}

#[test]
fn single_node_agent_is_plain_sac_bit_for_bit() {
    for seed in [0, 7] {
        let report = single_node_equivalence(seed, 100);
        assert_eq!(report.first_mismatch, None, "seed {seed}");
        assert_eq!(report.steps, 100);
    }
}

#[test]
fn replay_sampling_is_uniform() {
    let slots = 100;
    let mut buf = ReplayBuffer::new(slots, 1, 1);
    for k in 0..10_000 {
        buf.push(&Transition {
            state: vec![k as f64],
            action: vec![0.0],
            pre_squash: vec![0.0],
            reward: 0.0,
            next_state: vec![0.0],
            done: false,
            truncated: false,
        })
        .unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 10_000;
    let mut counts = vec![0usize; slots];
    for i in buf.sample_indices(draws, &mut rng) {
        counts[i] += 1;
    }
    let expected = draws as f64 / slots as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((slots - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi-square {stat}, p = {p}");
}

/// Frozen loss reports of the first updates after a warm-up on chain-LQR.
#[test]
fn golden_stochastic_trace() {
    let cfg = TrainConfig {
        total_steps: 200,
        ..small("chain-lqr-3", "hopper-chain")
    };
    let mut agent = build(cfg);
    train(&mut agent, &mut ());
    let reports: Vec<LossReport> = (0..5).map(|_| agent.update().unwrap()).collect();
    let got: Vec<[f64; 5]> = reports.iter().map(|r| [r.loss_v, r.loss_q1, r.loss_q2, r.loss_pi, r.mean_sub_entropy]).collect();
    let golden: [[f64; 5]; 2] = [
        [0.1695214754027691, 889.6796699008667, 889.1183059001952, -0.5881318014168314, 0.5844238617271538],
        [0.20315653549290166, 656.3475672415528, 657.036963634664, -0.679253907608902, 0.68006142480142],
    ];
    for (row, expected) in [&got[0], &got[4]].into_iter().zip(&golden) {
        for (g, e) in row.iter().zip(expected) {
            assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0), "{got:?}");
        }
    }
}
