//! Self-contained verification suite: convergence certificates of exact soft
//! policy iteration, gradient checks of every loss, density identities of
//! the factorized sampler, and the single-node equivalence with a plain SAC
//! update written without any graph machinery.
//!
//! Every check returns its measured quantities so callers can print them or
//! compare them against the tolerances pinned here.

use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::Instant;

use gauss_quad::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{Agent, TrainConfig, Transition};
use crate::bsn::{BsnGraph, BsnNode};
use crate::critic::{CriticSet, TransitionBatch};
use crate::envs::{make_env, EnvSpec};
use crate::ndmath::{adam_step, finite_diff_grad, max_relative_error, AdamState, Dense, Matrix, Mlp};
use crate::policy::{PolicySet, HALF_LOG_2PI, LOG_STD_MAX, LOG_STD_MIN};
use crate::rng::{stream, Stream};
use crate::tabular::{
    boltzmann, entropy_bonus, joint_policy_probs, soft_bellman_backup, soft_policy_evaluation, soft_policy_evaluation_exact,
    soft_policy_improvement, soft_policy_iteration, FactorizedTabularPolicy, TabularMdp,
};

/// Additive slack on `‖Q^{k+2} − Q^{k+1}‖ ≤ γ ‖Q^{k+1} − Q^k‖`.
pub const CONTRACTION_SLACK: f64 = 1e-12;
/// Fixed point versus horizon-200 forward enumeration.
pub const ENUMERATION_TOL: f64 = 1e-6;
/// Lower bound on `min (Q^{π_{k+1}} − Q^{π_k})`.
pub const MONOTONICITY_SLACK: f64 = -1e-10;
/// Lower bound on `min (Q* − Q^π)`.
pub const DOMINANCE_SLACK: f64 = -1e-8;
/// Policy-change threshold that ends soft policy iteration.
pub const ITERATION_TOL: f64 = 1e-8;
/// Boltzmann reconstruction through the factorized tables.
pub const FACTORIZATION_TOL: f64 = 1e-12;
/// Analytic versus central-difference gradients.
pub const GRADIENT_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Relative-error denominator floor for near-zero gradient entries, per unit
/// of the largest entry (at least 1) so that round-off in the difference
/// quotient does not dominate.
pub const GRADIENT_FLOOR: f64 = 1e-6;
/// Minimum distance of any ReLU pre-activation from zero in a gradient-check
/// instance, so that no central difference straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;
/// Minimum ReLU pre-activation distance from zero at a density-check sample,
/// so that no child network meets a kink anywhere on the integration cube.
pub const DENSITY_KINK_MARGIN: f64 = 2e-2;
/// Summed per-node log-densities versus quadrature of the sampler.
pub const CHAIN_RULE_TOL: f64 = 1e-6;
/// Summed per-node gradients versus the joint gradient.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u128,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckOutcome {
        name,
        passed,
        detail,
        elapsed_ms: start.elapsed().as_millis(),
    }
}

fn chain2() -> Arc<BsnGraph> {
    Arc::new(BsnGraph::chain(2))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Evaluation convergence

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub trials: usize,
    /// Largest `r_{k+1} − γ r_k` over all sweeps of all trials.
    pub worst_contraction_excess: f64,
    /// Largest `‖Q^{k+1} − Q^π‖ − γ ‖Q^k − Q^π‖` against the exact fixed point.
    pub worst_fixed_point_excess: f64,
    pub enumeration_error: f64,
}

impl EvaluationReport {
    pub fn passed(&self) -> bool {
        self.worst_contraction_excess <= CONTRACTION_SLACK
            && self.worst_fixed_point_excess <= CONTRACTION_SLACK
            && self.enumeration_error <= ENUMERATION_TOL
    }
}

/// Soft Q of `policy` by pushing the state-action distribution forward for
/// `horizon` steps from every `(s, 𝒜)`; specific to a two-node chain.
pub fn forward_enumeration_q(mdp: &TabularMdp, policy: &FactorizedTabularPolicy, horizon: usize) -> Vec<f64> {
    let (s_n, j_n) = (mdp.n_states(), mdp.n_joint());
    let (k1, k2) = (mdp.sizes()[0], mdp.sizes()[1]);
    // π(a₁, a₂ | s) = π₁(a₁|s) π₂(a₂|s, a₁), tables laid out per state then parent action.
    let joint = |s: usize| -> Vec<f64> {
        let mut out = vec![0.0; k1 * k2];
        for a1 in 0..k1 {
            for a2 in 0..k2 {
                out[a1 * k2 + a2] = policy.tables[0][s * k1 + a1] * policy.tables[1][(s * k1 + a1) * k2 + a2];
            }
        }
        out
    };
    let bonus: Vec<f64> = (0..s_n)
        .map(|s| {
            let h = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
            let p1 = &policy.tables[0][s * k1..(s + 1) * k1];
            let h2: f64 = (0..k1)
                .map(|a1| p1[a1] * h(&policy.tables[1][(s * k1 + a1) * k2..(s * k1 + a1 + 1) * k2]))
                .sum();
            (h(p1) + h2) / 2.0
        })
        .collect();
    let joints: Vec<Vec<f64>> = (0..s_n).map(joint).collect();
    let mut q = vec![0.0; s_n * j_n];
    for s0 in 0..s_n {
        for j0 in 0..j_n {
            let mut dist = vec![0.0; s_n * j_n];
            dist[s0 * j_n + j0] = 1.0;
            let mut total = 0.0;
            let mut discount = 1.0;
            for _ in 0..horizon {
                let mut next_state = vec![0.0; s_n];
                let mut reward = 0.0;
                for s in 0..s_n {
                    for j in 0..j_n {
                        let w = dist[s * j_n + j];
                        if w == 0.0 {
                            continue;
                        }
                        reward += w * mdp.reward(s, j);
                        for t in 0..s_n {
                            next_state[t] += w * mdp.transition(s, j, t);
                        }
                    }
                }
                let next_bonus: f64 = next_state.iter().zip(&bonus).map(|(p, b)| p * b).sum();
                total += discount * (reward + mdp.gamma * next_bonus);
                discount *= mdp.gamma;
                for t in 0..s_n {
                    for j in 0..j_n {
                        dist[t * j_n + j] = next_state[t] * joints[t][j];
                    }
                }
            }
            q[s0 * j_n + j0] = total;
        }
    }
    q
}

/// Iterative evaluation on 200 random two-node-chain MDPs (2–8 states, binary
/// node actions, γ cycling through 0.5, 0.9, 0.99), plus the enumeration oracle.
pub fn evaluation_convergence(seed: u64) -> EvaluationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e44a1);
    let gammas = [0.5, 0.9, 0.99];
    let mut worst = f64::NEG_INFINITY;
    let mut worst_fp = f64::NEG_INFINITY;
    let trials = 200;
    for trial in 0..trials {
        let n_states = rng.random_range(2..=8);
        let gamma = gammas[trial % 3];
        let mdp = TabularMdp::random(chain2(), vec![2, 2], n_states, gamma, &mut rng).expect("valid random MDP");
        let policy = FactorizedTabularPolicy::random(&mdp, &mut rng);
        let ev = soft_policy_evaluation(&mdp, &policy, 1e-10);
        for w in ev.residuals.windows(2) {
            worst = worst.max(w[1] - gamma * w[0]);
        }
        // Distance to the fixed point along a fresh iteration.
        let exact = soft_policy_evaluation_exact(&mdp, &policy).expect("non-singular");
        let mut q = vec![0.0; exact.len()];
        let mut prev = max_abs_diff(&q, &exact);
        for _ in 0..50 {
            q = soft_bellman_backup(&mdp, &policy, &q);
            let d = max_abs_diff(&q, &exact);
            worst_fp = worst_fp.max(d - gamma * prev);
            prev = d;
        }
    }
    let mdp = TabularMdp::random(chain2(), vec![2, 2], 4, 0.9, &mut rng).expect("valid random MDP");
    let policy = FactorizedTabularPolicy::random(&mdp, &mut rng);
    let fixed = soft_policy_evaluation(&mdp, &policy, 1e-12).q;
    let oracle = forward_enumeration_q(&mdp, &policy, 200);
    EvaluationReport {
        trials,
        worst_contraction_excess: worst,
        worst_fixed_point_excess: worst_fp,
        enumeration_error: max_abs_diff(&fixed, &oracle),
    }
}

// ---------------------------------------------------------------------------
// Improvement and optimality

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub mdps: usize,
    pub all_converged: bool,
    pub max_iterations: usize,
    /// Minimum certificate over every improvement step of every run.
    pub worst_monotonicity: f64,
    /// Minimum of `Q* − Q^π` over every random alternative policy.
    pub worst_dominance: f64,
    pub alternatives_per_mdp: usize,
}

impl IterationReport {
    pub fn monotone(&self) -> bool {
        self.worst_monotonicity >= MONOTONICITY_SLACK
    }

    pub fn optimal(&self) -> bool {
        self.all_converged && self.worst_dominance >= DOMINANCE_SLACK
    }
}

/// Soft policy iteration on 20 random two-node-chain MDPs; the first is the
/// 4-state instance, the rest have 2–8 states.
pub fn iteration_certificates(seed: u64) -> IterationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e0e41);
    let gammas = [0.5, 0.9, 0.99];
    let mut report = IterationReport {
        mdps: 20,
        all_converged: true,
        max_iterations: 0,
        worst_monotonicity: f64::INFINITY,
        worst_dominance: f64::INFINITY,
        alternatives_per_mdp: 100,
    };
    for k in 0..report.mdps {
        let n_states = if k == 0 { 4 } else { rng.random_range(2..=8) };
        let gamma = if k == 0 { 0.9 } else { gammas[k % 3] };
        let mdp = TabularMdp::random(chain2(), vec![2, 2], n_states, gamma, &mut rng).expect("valid random MDP");
        match soft_policy_iteration(&mdp, ITERATION_TOL) {
            Ok(res) => {
                report.max_iterations = report.max_iterations.max(res.policy_changes.len());
                for c in &res.certificate {
                    report.worst_monotonicity = report.worst_monotonicity.min(*c);
                }
                for _ in 0..report.alternatives_per_mdp {
                    let alt = FactorizedTabularPolicy::random(&mdp, &mut rng);
                    let q_alt = soft_policy_evaluation_exact(&mdp, &alt).expect("non-singular");
                    let gap = res.q.iter().zip(&q_alt).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
                    report.worst_dominance = report.worst_dominance.min(gap);
                }
            }
            Err(_) => report.all_converged = false,
        }
    }
    report
}

/// Worst `|reconstructed joint − Boltzmann|` over random instances where the
/// Boltzmann joint respects the graph: a two-node chain with arbitrary Q, and
/// three-node chain and tree graphs with Q summed from parent–child terms.
pub fn factorization_exactness(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfac70);
    let node = |id: &str, parents: &[&str]| BsnNode {
        id: id.into(),
        action_dims: vec![],
        parents: parents.iter().map(|p| p.to_string()).collect(),
    };
    let three_chain = vec![node("t1", &[]), node("t2", &["t1"]), node("t3", &["t2"])];
    let tree = vec![node("t1", &[]), node("t2", &["t1"]), node("t3", &["t1"])];
    let mut worst: f64 = 0.0;
    for (shape, nodes) in [("chain", Some(three_chain)), ("tree", Some(tree)), ("pair", None)] {
        let graph = match nodes {
            Some(mut n) => {
                for (i, x) in n.iter_mut().enumerate() {
                    x.action_dims = vec![i];
                }
                Arc::new(BsnGraph::new(n, None).expect("valid graph"))
            }
            None => chain2(),
        };
        let m = graph.len();
        let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(2..=3)).collect();
        for _ in 0..20 {
            let mdp = TabularMdp::random(graph.clone(), sizes.clone(), 3, 0.9, &mut rng).expect("valid random MDP");
            let (s_n, j_n) = (mdp.n_states(), mdp.n_joint());
            let q: Vec<f64> = if shape == "pair" {
                (0..s_n * j_n).map(|_| rng.random_range(-3.0..3.0)).collect()
            } else {
                // Q(s, 𝒜) = f(s, a_root) + Σ_child g_child(s, a_parent, a_child)
                let root: Vec<f64> = (0..s_n * sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let pair: Vec<Vec<f64>> = (1..m).map(|_| (0..s_n * 9).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
                let mut q = Vec::with_capacity(s_n * j_n);
                for s in 0..s_n {
                    for j in 0..j_n {
                        let t = mdp.tuple(j);
                        let mut v = root[s * sizes[0] + t[0]];
                        for i in 1..m {
                            let p = mdp.graph().parents_of(i)[0];
                            v += pair[i - 1][s * 9 + t[p] * 3 + t[i]];
                        }
                        q.push(v);
                    }
                }
                q
            };
            let policy = soft_policy_improvement(&mdp, &q);
            for s in 0..s_n {
                worst = worst.max(max_abs_diff(&joint_policy_probs(&mdp, &policy, s), &boltzmann(&mdp, &q, s)));
            }
        }
    }
    worst
}

/// Worst `‖𝒯Q₁ − 𝒯Q₂‖ − γ‖Q₁ − Q₂‖` over 1000 random tables, MDPs and policies.
pub fn bellman_contraction(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe11);
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..1000 {
        let gamma = [0.5, 0.9, 0.99][trial % 3];
        let n_states = rng.random_range(1..=6);
        let mdp = TabularMdp::random(chain2(), vec![2, 2], n_states, gamma, &mut rng).expect("valid random MDP");
        let policy = FactorizedTabularPolicy::random(&mdp, &mut rng);
        let scale = rng.random_range(0.1..100.0);
        let q1: Vec<f64> = (0..n_states * 4).map(|_| rng.random_range(-scale..scale)).collect();
        let q2: Vec<f64> = (0..n_states * 4).map(|_| rng.random_range(-scale..scale)).collect();
        let lhs = max_abs_diff(&soft_bellman_backup(&mdp, &policy, &q1), &soft_bellman_backup(&mdp, &policy, &q2));
        worst = worst.max(lhs - gamma * max_abs_diff(&q1, &q2));
    }
    worst
}

/// Entropy bonus must match the definition `(1/m) Σᵢ E[Hᵢ]` on the uniform policy.
fn uniform_entropy_ok() -> bool {
    let mdp = TabularMdp::random(chain2(), vec![2, 3], 2, 0.9, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid");
    let h = entropy_bonus(&mdp, &FactorizedTabularPolicy::uniform(&mdp));
    let expected = (2f64.ln() + 3f64.ln()) / 2.0;
    h.iter().all(|v| (v - expected).abs() < 1e-14)
}

// ---------------------------------------------------------------------------
// Gradient checks

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub instances: usize,
    pub value: f64,
    pub q: f64,
    pub policy: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.value < GRADIENT_REL_TOL && self.q < GRADIENT_REL_TOL && self.policy < GRADIENT_REL_TOL
    }
}

fn flat(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied()).collect()
}

fn gradient_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    max_relative_error(analytic, fd, GRADIENT_FLOOR * scale)
}

fn kink_margin(net: &Mlp, input: &Matrix) -> f64 {
    net.forward_batch(input).expect("shape").1.kink_margin()
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Twenty frozen instances per loss, each with common random numbers.
pub fn gradient_checks(seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x96ad);
    let mut report = GradientReport {
        instances: 20,
        value: 0.0,
        q: 0.0,
        policy: 0.0,
    };
    let graphs = [
        Arc::new(BsnGraph::chain(2)),
        Arc::new(crate::bsn::preset("hopper-chain", 3).expect("preset")),
        Arc::new(BsnGraph::single(2)),
    ];
    for k in 0..report.instances {
        let graph = graphs[k % graphs.len()].clone();
        let (state_dim, action_dim) = (3, graph.action_dim_total());
        let bounds: Vec<f64> = (0..action_dim).map(|_| rng.random_range(0.5..2.0)).collect();
        let policies = PolicySet::new(graph, state_dim, &bounds, &[10, 10], &mut rng).expect("policy");
        let critics = CriticSet::new(state_dim, action_dim, &[10, 10], 0.99, 0.005, &mut rng).expect("critics");
        // Redraw the inputs until no ReLU sits within finite-difference reach of its kink.
        let n = 6;
        let (states, noise, batch) = loop {
            let states = random_matrix(n, state_dim, &mut rng);
            let noise = policies.draw_noise(n, &mut rng);
            let batch = TransitionBatch {
                states: states.clone(),
                actions: random_matrix(n, action_dim, &mut rng),
                rewards: (0..n).map(|_| rng.random_range(-2.0..0.0)).collect(),
                next_states: random_matrix(n, state_dim, &mut rng),
                done: (0..n).map(|i| i == 0).collect(),
            };
            let sample = policies.sample_batch(&states, &noise).expect("sample");
            let policy_inputs = states.hcat(&sample.squashed).expect("rows");
            let q_inputs = states.hcat(&batch.actions).expect("rows");
            let margin = [
                sample.kink_margin(),
                kink_margin(&critics.v, &states),
                kink_margin(&critics.q1, &q_inputs),
                kink_margin(&critics.q2, &q_inputs),
                kink_margin(&critics.q1, &policy_inputs),
                kink_margin(&critics.q2, &policy_inputs),
            ]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
            if margin >= KINK_MARGIN {
                break (states, noise, batch);
            }
        };

        // Value loss with its targets frozen.
        let targets = critics.soft_value_targets_with_noise(&policies, &states, &noise).expect("targets");
        let analytic = flat(&critics.value_loss_against(&states, &targets).expect("loss").grads);
        let fd = finite_diff_grad(
            |x| {
                let mut c = critics.clone();
                c.v.set_flat(x).expect("shape");
                c.value_loss_against(&states, &targets).expect("loss").loss
            },
            &critics.v.to_flat(),
            FD_STEP,
        )
        .expect("finite");
        report.value = report.value.max(gradient_error(&analytic, &fd));

        // Twin Q losses.
        let out = critics.q_loss(&batch, 5.0).expect("q loss");
        for (twin, analytic) in [(1, flat(&out.grads_q1)), (2, flat(&out.grads_q2))] {
            let base = if twin == 1 { critics.q1.to_flat() } else { critics.q2.to_flat() };
            let fd = finite_diff_grad(
                |x| {
                    let mut c = critics.clone();
                    if twin == 1 {
                        c.q1.set_flat(x).expect("shape");
                        c.q_loss(&batch, 5.0).expect("q loss").loss_q1
                    } else {
                        c.q2.set_flat(x).expect("shape");
                        c.q_loss(&batch, 5.0).expect("q loss").loss_q2
                    }
                },
                &base,
                FD_STEP,
            )
            .expect("finite");
            report.q = report.q.max(gradient_error(&analytic, &fd));
        }

        // Policy loss through the twin minimum, every sub-policy.
        let out = policies.policy_loss_with_noise(&critics.min_q(), &states, &noise).expect("policy loss");
        for node in 0..policies.subs().len() {
            let fd = finite_diff_grad(
                |x| {
                    let mut p = policies.clone();
                    p.subs_mut()[node].net.set_flat(x).expect("shape");
                    p.policy_loss_with_noise(&critics.min_q(), &states, &noise).expect("policy loss").loss
                },
                &policies.subs()[node].net.to_flat(),
                FD_STEP,
            )
            .expect("finite");
            report.policy = report.policy.max(gradient_error(&flat(&out.grads[node]), &fd));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Density identities of the factorized sampler

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability that the sampler's normalized action lands in the cube of
/// half-width `h` around `center`, integrated over the noise: each dimension
/// (in topological order) contributes a Gauss–Legendre integral over the
/// noise interval its node maps onto the cube's side.
fn cube_probability(policies: &PolicySet, state: &[f64], center: &[f64], h: f64, rule: &GaussLegendre) -> f64 {
    let graph = policies.graph().clone();
    let plan: Vec<(usize, usize, usize)> = graph
        .order()
        .iter()
        .flat_map(|&i| graph.node(i).action_dims.iter().enumerate().map(move |(j, &d)| (i, j, d)))
        .collect();
    let mut assigned = vec![0.0; policies.action_dim()];
    fn level(
        k: usize,
        plan: &[(usize, usize, usize)],
        policies: &PolicySet,
        state: &[f64],
        center: &[f64],
        h: f64,
        rule: &GaussLegendre,
        assigned: &mut Vec<f64>,
    ) -> f64 {
        if k == plan.len() {
            return 1.0;
        }
        let (node, j, dim) = plan[k];
        let (mu, log_std) = policies.node_gaussian(node, state, assigned).expect("finite instance");
        let sigma = log_std[j].exp();
        let lo = ((center[dim] - h).atanh() - mu[j]) / sigma;
        let hi = ((center[dim] + h).atanh() - mu[j]) / sigma;
        rule.integrate(lo, hi, |e| {
            assigned[dim] = (mu[j] + sigma * e).tanh();
            std_normal_pdf(e) * level(k + 1, plan, policies, state, center, h, rule, assigned)
        })
    }
    level(0, &plan, policies, state, center, h, rule, &mut assigned)
}

/// Joint log-density of the sampler at `action` from cube probabilities at
/// half-widths `h`, `h/2` and `h/4`, Richardson-extrapolated through the
/// `h²` and `h⁴` terms.
pub fn quadrature_log_density(policies: &PolicySet, state: &[f64], action: &[f64], h: f64) -> f64 {
    let rule = GaussLegendre::new(NonZeroUsize::new(10).expect("nonzero"));
    let scale = policies.action_scale();
    let center: Vec<f64> = action.iter().zip(scale).map(|(a, s)| a / s).collect();
    let d = center.len() as i32;
    let density = |w: f64| cube_probability(policies, state, &center, w, &rule) / (2.0 * w).powi(d);
    let (d1, d2, d4) = (density(h), density(h / 2.0), density(h / 4.0));
    let r1 = (4.0 * d2 - d1) / 3.0;
    let r2 = (4.0 * d4 - d2) / 3.0;
    let extrapolated = (16.0 * r2 - r1) / 15.0;
    extrapolated.ln() - scale.iter().map(|s| s.ln()).sum::<f64>()
}

fn frozen_density_instances(seed: u64, corrupt: bool) -> Vec<PolicySet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a1);
    let star = BsnGraph::new(
        vec![
            BsnNode { id: "hub".into(), action_dims: vec![1], parents: vec![] },
            BsnNode { id: "left".into(), action_dims: vec![0], parents: vec!["hub".into()] },
            BsnNode { id: "right".into(), action_dims: vec![2], parents: vec!["hub".into()] },
        ],
        None,
    )
    .expect("valid star");
    let graphs = [
        crate::bsn::preset("hopper-chain", 3).expect("preset"),
        BsnGraph::chain(2),
        BsnGraph::single(2),
        star,
    ];
    graphs
        .into_iter()
        .map(|g| {
            let bounds: Vec<f64> = (0..g.action_dim_total()).map(|_| rng.random_range(0.5..2.0)).collect();
            let mut p = PolicySet::new(Arc::new(g), 2, &bounds, &[8], &mut rng).expect("policy");
            if corrupt {
                p.corrupt_tanh_correction();
            }
            p
        })
        .collect()
}

/// Worst `|Σᵢ log πᵢ − quadrature log-density|` over frozen ≤3-dim instances.
pub fn chain_rule_quadrature(seed: u64, corrupt: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a0d);
    let mut worst: f64 = 0.0;
    for policies in frozen_density_instances(seed, corrupt) {
        let mut accepted = 0;
        while accepted < 3 {
            let state = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let noise = policies.draw_noise(1, &mut rng);
            let sample = policies.sample_batch(&Matrix::row_vector(&state), &noise).expect("sample");
            let interior = sample.squashed.row(0).iter().all(|t| t.abs() < 0.95);
            if !interior || sample.kink_margin() < DENSITY_KINK_MARGIN {
                continue;
            }
            accepted += 1;
            let action: Vec<f64> = sample.squashed.row(0).iter().zip(policies.action_scale()).map(|(t, s)| t * s).collect();
            let oracle = quadrature_log_density(&policies, &state, &action, 2e-3);
            let summed: f64 = sample.log_prob.row(0).iter().sum();
            worst = worst.max((summed - oracle).abs());
        }
    }
    worst
}

/// Worst gap between the gradient of `Σᵢ log πᵢ` and the sum of the
/// per-node log-density gradients, over all sub-policy parameters.
pub fn gradient_decomposition(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde0c);
    let mut worst: f64 = 0.0;
    for graph in ["hopper-chain", "walker-tree", "humanoid-star"] {
        let action_dim = if graph == "hopper-chain" { 3 } else { 6 };
        let g = Arc::new(crate::bsn::preset(graph, action_dim).expect("preset"));
        let bounds = vec![1.0; action_dim];
        let policies = PolicySet::new(g.clone(), 4, &bounds, &[12, 12], &mut rng).expect("policy");
        let n = 5;
        let states = random_matrix(n, 4, &mut rng);
        let noise = policies.draw_noise(n, &mut rng);
        let sample = policies.sample_batch(&states, &noise).expect("sample");
        let zero_action = Matrix::zeros(n, action_dim);
        let mut all = Matrix::zeros(n, g.len());
        all.as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
        let joint = policies.backward(&sample, &all, &zero_action).expect("backward");
        let mut summed: Vec<Vec<f64>> = joint.iter().map(|l| vec![0.0; flat(l).len()]).collect();
        for i in 0..g.len() {
            let mut one_hot = Matrix::zeros(n, g.len());
            for b in 0..n {
                one_hot[(b, i)] = 1.0;
            }
            let per = policies.backward(&sample, &one_hot, &zero_action).expect("backward");
            for (acc, layers) in summed.iter_mut().zip(&per) {
                for (a, v) in acc.iter_mut().zip(flat(layers)) {
                    *a += v;
                }
            }
        }
        for (acc, layers) in summed.iter().zip(&joint) {
            worst = worst.max(max_abs_diff(acc, &flat(layers)));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Single-node equivalence with a plain SAC update

fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

/// Soft actor-critic with one Gaussian tanh policy network, written against
/// raw networks and optimizers only.
struct PlainSac {
    actor: Mlp,
    v: Mlp,
    v_target: Mlp,
    q1: Mlp,
    q2: Mlp,
    opt: [AdamState; 4],
    replay: Vec<Transition>,
    replay_rng: crate::rng::StreamRng,
    noise_rng: crate::rng::StreamRng,
    scale: Vec<f64>,
    cfg: TrainConfig,
}

struct PlainSample {
    cache: crate::ndmath::ForwardCache,
    squashed: Matrix,
    log_std: Matrix,
    live: Matrix,
    eps: Matrix,
    log_prob: Vec<f64>,
}

impl PlainSac {
    fn new(cfg: &TrainConfig, spec: &EnvSpec) -> Self {
        let hidden = cfg.hidden();
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend_from_slice(&hidden);
            s.push(output);
            s
        };
        let mut init = stream(cfg.seed, Stream::Init);
        let actor = Mlp::init(&sizes(spec.state_dim, 2 * spec.action_dim), &mut init);
        let v = Mlp::init(&sizes(spec.state_dim, 1), &mut init);
        let q1 = Mlp::init(&sizes(spec.state_dim + spec.action_dim, 1), &mut init);
        let q2 = Mlp::init(&sizes(spec.state_dim + spec.action_dim, 1), &mut init);
        Self {
            opt: [AdamState::new(&q1), AdamState::new(&q2), AdamState::new(&v), AdamState::new(&actor)],
            v_target: v.clone(),
            actor,
            v,
            q1,
            q2,
            replay: Vec::new(),
            replay_rng: stream(cfg.seed, Stream::Replay),
            noise_rng: stream(cfg.seed, Stream::Update),
            scale: spec.action_bound.clone(),
            cfg: cfg.clone(),
        }
    }

    fn sample(&mut self, states: &Matrix) -> PlainSample {
        let (n, a) = (states.rows(), self.scale.len());
        let noise: Vec<f64> = (0..n * a).map(|_| self.noise_rng.sample(StandardNormal)).collect();
        let (out, cache) = self.actor.forward_batch(states).expect("actor");
        let mut s = PlainSample {
            cache,
            squashed: Matrix::zeros(n, a),
            log_std: Matrix::zeros(n, a),
            live: Matrix::zeros(n, a),
            eps: Matrix::zeros(n, a),
            log_prob: vec![0.0; n],
        };
        for b in 0..n {
            let mut lp = 0.0;
            for k in 0..a {
                let raw = out[(b, a + k)];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let e = noise[b * a + k];
                let u = out[(b, k)] + ls.exp() * e;
                s.squashed[(b, k)] = u.tanh();
                s.log_std[(b, k)] = ls;
                s.live[(b, k)] = if raw > LOG_STD_MIN && raw < LOG_STD_MAX { 1.0 } else { 0.0 };
                s.eps[(b, k)] = e;
                lp += -0.5 * e * e - ls - HALF_LOG_2PI - self.scale[k].ln();
                lp -= log_one_minus_tanh_sq(u);
            }
            s.log_prob[b] = lp;
        }
        s
    }

    fn min_q(&self, states: &Matrix, actions: &Matrix) -> (Vec<f64>, Matrix) {
        let x = states.hcat(actions).expect("rows");
        let (a, ca) = self.q1.forward_batch(&x).expect("q1");
        let (b, cb) = self.q2.forward_batch(&x).expect("q2");
        let n = x.rows();
        let (mut ga, mut gb) = (Matrix::zeros(n, 1), Matrix::zeros(n, 1));
        let mut q = Vec::with_capacity(n);
        for r in 0..n {
            if b[(r, 0)] < a[(r, 0)] {
                q.push(b[(r, 0)]);
                gb[(r, 0)] = 1.0;
            } else {
                q.push(a[(r, 0)]);
                ga[(r, 0)] = 1.0;
            }
        }
        let da = self.q1.input_grad_batch(&ca, &ga).expect("grad");
        let db = self.q2.input_grad_batch(&cb, &gb).expect("grad");
        let s = states.cols();
        let mut g = Matrix::zeros(n, actions.cols());
        for r in 0..n {
            for c in 0..actions.cols() {
                g[(r, c)] = da[(r, s + c)] + db[(r, s + c)];
            }
        }
        (q, g)
    }

    fn regress(net: &Mlp, x: &Matrix, y: &[f64]) -> (f64, Vec<Dense>) {
        let (pred, cache) = net.forward_batch(x).expect("forward");
        let n = y.len();
        let mut grad = Matrix::zeros(n, 1);
        let mut loss = 0.0;
        for b in 0..n {
            let r = pred[(b, 0)] - y[b];
            loss += 0.5 * r * r;
            grad[(b, 0)] = r / n as f64;
        }
        (loss / n as f64, net.backward_batch(&cache, &grad).expect("backward").layers)
    }

    /// Returns `(loss_q1, loss_q2, loss_v, loss_pi)`.
    fn update(&mut self, step: u64) -> [f64; 4] {
        let n = self.cfg.batch_size;
        let idx: Vec<usize> = (0..n).map(|_| self.replay_rng.random_range(0..self.replay.len())).collect();
        let (sd, ad) = (self.replay[0].state.len(), self.scale.len());
        let mut states = Matrix::zeros(n, sd);
        let mut next = Matrix::zeros(n, sd);
        let mut actions = Matrix::zeros(n, ad);
        for (r, &i) in idx.iter().enumerate() {
            let t = &self.replay[i];
            states.row_mut(r).copy_from_slice(&t.state);
            next.row_mut(r).copy_from_slice(&t.next_state);
            for k in 0..ad {
                actions[(r, k)] = t.action[k] / self.scale[k];
            }
        }
        let v_next = self.v_target.predict_batch(&next).expect("target");
        let y: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let t = &self.replay[i];
                let mut y = self.cfg.reward_scale * t.reward;
                if !t.done {
                    y += self.cfg.gamma * v_next[(r, 0)];
                }
                y
            })
            .collect();
        let x = states.hcat(&actions).expect("rows");
        let (l1, g1) = Self::regress(&self.q1, &x, &y);
        adam_step(&mut self.q1, &g1, &mut self.opt[0], self.cfg.lr_q).expect("finite");
        let (l2, g2) = Self::regress(&self.q2, &x, &y);
        adam_step(&mut self.q2, &g2, &mut self.opt[1], self.cfg.lr_q).expect("finite");

        let s = self.sample(&states);
        let (q, _) = self.min_q(&states, &s.squashed);
        let v_target: Vec<f64> = q.iter().zip(&s.log_prob).map(|(q, lp)| q - lp).collect();
        let (lv, gv) = Self::regress(&self.v, &states, &v_target);
        adam_step(&mut self.v, &gv, &mut self.opt[2], self.cfg.lr_v).expect("finite");

        let s = self.sample(&states);
        let (q, dq) = self.min_q(&states, &s.squashed);
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        for b in 0..n {
            loss += s.log_prob[b] - q[b];
        }
        let mut out_grad = Matrix::zeros(n, 2 * ad);
        for b in 0..n {
            for k in 0..ad {
                let t = s.squashed[(b, k)];
                let du = dq[(b, k)] * -inv_n * (1.0 - t * t) + inv_n * 2.0 * t;
                out_grad[(b, k)] = du;
                let sigma_eps = s.log_std[(b, k)].exp() * s.eps[(b, k)];
                out_grad[(b, ad + k)] = (du * sigma_eps - inv_n) * s.live[(b, k)];
            }
        }
        let ga = self.actor.backward_batch(&s.cache, &out_grad).expect("backward").layers;
        adam_step(&mut self.actor, &ga, &mut self.opt[3], self.cfg.lr_pi).expect("finite");

        if step.is_multiple_of(self.cfg.target_update_interval) {
            let tau = self.cfg.tau;
            for (t, v) in self.v_target.layers_mut().iter_mut().zip(self.v.layers()) {
                for (a, b) in t.weight.as_mut_slice().iter_mut().zip(v.weight.as_slice()) {
                    *a = tau * b + (1.0 - tau) * *a;
                }
                for (a, b) in t.bias.iter_mut().zip(&v.bias) {
                    *a = tau * b + (1.0 - tau) * *a;
                }
            }
        }
        [l1, l2, lv, loss * inv_n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub steps: u64,
    /// First update (1-based) and quantity at which the paths diverged.
    pub first_mismatch: Option<(u64, String)>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Runs a single-node agent and the plain SAC path side by side on a shared
/// replay of uniform-random transitions and compares every loss and every
/// parameter bit-for-bit after each of `steps` updates.
pub fn single_node_equivalence(seed: u64, steps: u64) -> EquivalenceReport {
    let cfg = TrainConfig {
        env: "chain-lqr-3".into(),
        seed,
        batch_size: 32,
        hidden_units: 16,
        ..TrainConfig::default()
    };
    let mut env = make_env(&cfg.env).expect("registered env");
    let spec = env.spec().clone();
    let mut agent = Agent::new(cfg.clone(), Arc::new(BsnGraph::single(spec.action_dim)), &spec).expect("agent");
    let mut plain = PlainSac::new(&cfg, &spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ac);
    let mut state = env.reset(rng.random());
    for _ in 0..400 {
        let ja = agent.policies.uniform_action(&mut rng);
        let step = env.step(&ja.action).expect("step");
        let t = Transition {
            state: state.clone(),
            action: ja.action,
            pre_squash: ja.pre_squash,
            reward: step.reward,
            next_state: step.state.clone(),
            done: false,
            truncated: step.truncated,
        };
        agent.observe(&t).expect("observe");
        plain.replay.push(t);
        state = if step.truncated { env.reset(rng.random()) } else { step.state };
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for k in 1..=steps {
        let report = agent.update().expect("update");
        let losses = plain.update(k);
        let ours = [report.loss_q1, report.loss_q2, report.loss_v, report.loss_pi];
        let names = ["loss_q1", "loss_q2", "loss_v", "loss_pi"];
        for i in 0..4 {
            if ours[i].to_bits() != losses[i].to_bits() {
                return EquivalenceReport {
                    steps,
                    first_mismatch: Some((k, format!("{} {} vs {}", names[i], ours[i], losses[i]))),
                };
            }
        }
        let pairs = [
            ("policy", &agent.policies.subs()[0].net, &plain.actor),
            ("v", &agent.critics.v, &plain.v),
            ("v_target", &agent.critics.v_target, &plain.v_target),
            ("q1", &agent.critics.q1, &plain.q1),
            ("q2", &agent.critics.q2, &plain.q2),
        ];
        for (name, a, b) in pairs {
            if bits(&a.to_flat()) != bits(&b.to_flat()) {
                return EquivalenceReport {
                    steps,
                    first_mismatch: Some((k, format!("{name} parameters differ by up to {:e}", max_abs_diff(&a.to_flat(), &b.to_flat())))),
                };
            }
        }
    }
    EquivalenceReport { steps, first_mismatch: None }
}

// ---------------------------------------------------------------------------

/// Runs every check. `corrupt_tanh_correction` drops the tanh log-det term
/// from the densities under test; the chain-rule check must then fail.
pub fn run_all(seed: u64, corrupt_tanh_correction: bool) -> Vec<CheckOutcome> {
    vec![
        timed("evaluation-convergence", || {
            let r = evaluation_convergence(seed);
            (
                r.passed(),
                format!(
                    "trials={} worst_contraction_excess={:e} worst_fixed_point_excess={:e} enumeration_error={:e}",
                    r.trials, r.worst_contraction_excess, r.worst_fixed_point_excess, r.enumeration_error
                ),
            )
        }),
        timed("improvement-monotonicity+optimality", || {
            let r = iteration_certificates(seed);
            (
                r.monotone() && r.optimal(),
                format!(
                    "mdps={} converged={} max_iterations={} worst_monotonicity={:e} worst_dominance={:e}",
                    r.mdps, r.all_converged, r.max_iterations, r.worst_monotonicity, r.worst_dominance
                ),
            )
        }),
        timed("factorization-exactness", || {
            let w = factorization_exactness(seed);
            (w <= FACTORIZATION_TOL && uniform_entropy_ok(), format!("worst_joint_error={w:e}"))
        }),
        timed("bellman-contraction", || {
            let w = bellman_contraction(seed);
            (w <= CONTRACTION_SLACK, format!("trials=1000 worst_excess={w:e}"))
        }),
        timed("loss-gradients", || {
            let r = gradient_checks(seed);
            (
                r.passed(),
                format!("instances={} value={:e} q={:e} policy={:e}", r.instances, r.value, r.q, r.policy),
            )
        }),
        timed("chain-rule-density", || {
            let w = chain_rule_quadrature(seed, corrupt_tanh_correction);
            (w <= CHAIN_RULE_TOL, format!("worst_log_density_error={w:e}"))
        }),
        timed("gradient-decomposition", || {
            let w = gradient_decomposition(seed);
            (w <= DECOMPOSITION_TOL, format!("worst_abs_error={w:e}"))
        }),
        timed("single-node-sac-equivalence", || {
            let r = single_node_equivalence(seed, 100);
            match &r.first_mismatch {
                None => (true, format!("updates={} bitwise_identical=true", r.steps)),
                Some((k, what)) => (false, format!("diverged at update {k}: {what}")),
            }
        }),
    ]
}
