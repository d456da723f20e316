use std::num::NonZeroUsize;
use std::sync::Arc;

use bsac_core::bsn::{preset, BsnGraph};
use bsac_core::critic::CriticSet;
use bsac_core::ndmath::Matrix;
use bsac_core::policy::{FnActionValue, JointAction, PolicySet};
use gauss_quad::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One-dimensional policy whose output head is the constant `(mu, log_std)`.
fn constant_head(scale: f64, mu: f64, log_std: f64) -> PolicySet {
    let mut p = PolicySet::zeros(Arc::new(BsnGraph::single(1)), 2, &[scale], &[4]).unwrap();
    let last = p.subs_mut()[0].net.layers_mut().last_mut().unwrap();
    last.bias = vec![mu, log_std];
    p
}

fn repeated(state: &[f64], n: usize) -> Matrix {
    Matrix::from_rows(&vec![state.to_vec(); n]).unwrap()
}

#[test]
fn deterministic_action_is_the_narrow_sample_mean() {
    let p = constant_head(1.0, 0.3, -6.0);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = p.draw_noise(n, &mut rng);
    let sample = p.sample_batch(&repeated(&[0.1, -0.2], n), &noise).unwrap();
    let xs = sample.squashed.column(0);
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let det = p.deterministic_action(&[0.1, -0.2]).unwrap()[0];
    assert_eq!(det, 0.3f64.tanh());
    assert!((mean - det).abs() < 3.0 * (var / n as f64).sqrt(), "mean {mean} det {det}");
}

#[test]
fn zero_networks_act_at_the_centre() {
    let graph = Arc::new(preset("walker-tree", 6).unwrap());
    let p = PolicySet::zeros(graph, 5, &[1.0; 6], &[8, 8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_eq!(p.deterministic_action(&s).unwrap(), vec![0.0; 6]);
    }
}

#[test]
fn deterministic_action_is_reproducible() {
    let graph = Arc::new(preset("hopper-chain", 3).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = PolicySet::new(graph, 4, &[1.0, 2.0, 0.5], &[16], &mut rng).unwrap();
    let s = [0.3, -1.2, 0.05, 2.0];
    let a = p.deterministic_action(&s).unwrap();
    let b = p.deterministic_action(&s).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn density_integrates_to_one_over_the_box() {
    let rule = GaussLegendre::new(NonZeroUsize::new(200).unwrap());
    for (scale, mu, ls) in [(2.0, 0.4, -0.5), (1.0, -0.8, -1.0), (0.5, 0.0, -0.4)] {
        let p = constant_head(scale, mu, ls);
        let mass = rule.integrate(-scale, scale, |a| {
            let t: f64 = a / scale;
            let action = JointAction {
                action: vec![a],
                pre_squash: vec![t.atanh()],
                per_node_log_prob: Default::default(),
            };
            p.log_prob_joint(&[0.0, 0.0], &action).unwrap().0.exp()
        });
        assert!((mass - 1.0).abs() < 1e-6, "scale {scale}: mass {mass}");
    }
}

#[test]
fn soft_value_target_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let graph = Arc::new(BsnGraph::single(1));
    let mut p = PolicySet::new(graph, 2, &[1.0], &[8], &mut rng).unwrap();
    p.subs_mut()[0].net.layers_mut().last_mut().unwrap().bias[1] = -0.7;
    let critics = CriticSet::new(2, 1, &[8], 0.99, 0.005, &mut rng).unwrap();
    let state = [0.4, -0.9];

    // Oracle: integrate over the standard-normal noise with a hand-written density.
    let out = p.subs()[0].net.predict(&state).unwrap();
    let (mu, ls) = (out[0], out[1]);
    let sigma = ls.exp();
    let integrand = |e: f64| {
        let u = mu + sigma * e;
        let t = u.tanh();
        let input = [state[0], state[1], t];
        let q = critics.q1.predict(&input).unwrap()[0].min(critics.q2.predict(&input).unwrap()[0]);
        let log_pi = -0.5 * e * e - ls - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - t * t).ln();
        let phi = (-0.5 * e * e).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi * (q - log_pi)
    };
    let rule = GaussLegendre::new(NonZeroUsize::new(400).unwrap());
    let exact = rule.integrate(-9.0, 9.0, integrand);

    let n = 100_000;
    let noise = p.draw_noise(n, &mut rng);
    let targets = critics.soft_value_targets_with_noise(&p, &repeated(&state, n), &noise).unwrap();
    let mean = targets.iter().sum::<f64>() / n as f64;
    let var = targets.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "mc {mean} quad {exact} se {se}");
}

#[test]
fn constant_critic_leaves_only_the_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graph = Arc::new(preset("hopper-chain", 3).unwrap());
    let p = PolicySet::new(graph, 4, &[1.0; 3], &[8], &mut rng).unwrap();
    let states = Matrix::from_rows(&(0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>()).unwrap();
    let noise = p.draw_noise(6, &mut rng);
    let zero = FnActionValue(|_: &[f64], a: &[f64]| (0.0, vec![0.0; a.len()]));
    let shifted = FnActionValue(|_: &[f64], a: &[f64]| (7.5, vec![0.0; a.len()]));
    let l0 = p.policy_loss_with_noise(&zero, &states, &noise).unwrap();
    let l1 = p.policy_loss_with_noise(&shifted, &states, &noise).unwrap();
    assert_eq!(l0.grads, l1.grads);
    assert!((l0.loss - l1.loss - 7.5).abs() < 1e-12);
    assert!((l0.loss - l0.mean_log_prob).abs() < 1e-12);
}

#[test]
fn three_node_chain_rule_against_quadrature() {
    for seed in 0..3 {
        let err = bsac_core::checks::chain_rule_quadrature(seed, false);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}
