//! Exact soft policy iteration on finite MDPs whose joint action is a tuple
//! of per-node discrete actions arranged along a BSN.
//!
//! Conventions shared by every routine here:
//! - node `i` of the graph owns tuple position `i`; joint actions are
//!   enumerated in mixed radix with node 0 most significant;
//! - the entropy bonus of a state is `(1/m) Σᵢ Hᵢ(s)`, each conditional
//!   entropy averaged under the joint policy's parent distribution;
//! - the entropy-augmented reward is `r_π(s, 𝒜) = r(s, 𝒜) + γ E_{s'}[bonus(s')]`;
//! - improvement targets the Boltzmann joint `∝ exp(m · Q)`, the maximizer of
//!   `E[Q] + (1/m) H` over joint distributions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::bsn::BsnGraph;

pub const ITERATION_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TabularError {
    #[error("invalid tabular model: {0}")]
    Invalid(String),
    #[error("soft policy iteration did not converge in {iterations} iterations; last policy changes {trace:?}")]
    IterationCap { iterations: usize, trace: Vec<f64> },
    #[error("singular evaluation system")]
    Singular,
}

/// Finite MDP with a factorized joint action space.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    graph: Arc<BsnGraph>,
    sizes: Vec<usize>,
    n_states: usize,
    /// `P(s'|s, 𝒜)` at `(s · J + j) · S + s'`.
    transitions: Vec<f64>,
    /// `r(s, 𝒜)` at `s · J + j`.
    rewards: Vec<f64>,
    pub gamma: f64,
    tuples: Vec<Vec<usize>>,
}

/// Per-node conditional tables `πᵢ(aᵢ | s, parent actions)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedTabularPolicy {
    /// Node `i`: entry `(s · Cᵢ + c) · kᵢ + aᵢ` where `c` encodes the parents' actions.
    pub tables: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `Q(s, 𝒜)` at `s · J + j`.
    pub q: Vec<f64>,
    pub iterations: usize,
    /// `‖Q^{k+1} − Q^k‖_∞` per sweep.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub q: Vec<f64>,
    pub policy: FactorizedTabularPolicy,
    /// Per improvement step, `min_{s,𝒜} (Q^{π_{k+1}} − Q^{π_k})`.
    pub certificate: Vec<f64>,
    /// Per improvement step, the max-abs change across all conditional tables.
    pub policy_changes: Vec<f64>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

impl TabularMdp {
    pub fn new(
        graph: Arc<BsnGraph>,
        sizes: Vec<usize>,
        n_states: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, TabularError> {
        let bad = |m: String| Err(TabularError::Invalid(m));
        if sizes.len() != graph.len() {
            return bad(format!("{} action sizes for {} nodes", sizes.len(), graph.len()));
        }
        if sizes.contains(&0) || n_states == 0 {
            return bad("empty action or state set".into());
        }
        if !(0.0..1.0).contains(&gamma) {
            return bad(format!("discount {gamma} outside [0, 1)"));
        }
        let joint: usize = sizes.iter().product();
        if rewards.len() != n_states * joint || transitions.len() != n_states * joint * n_states {
            return bad("table sizes do not match states × joint actions".into());
        }
        if !rewards.iter().all(|r| r.is_finite()) {
            return bad("non-finite reward".into());
        }
        for (row, chunk) in transitions.chunks(n_states).enumerate() {
            if chunk.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return bad(format!("transition row {row} has a negative or non-finite entry"));
            }
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return bad(format!("transition row {row} sums to {sum}"));
            }
        }
        let tuples = (0..joint)
            .map(|mut j| {
                let mut t = vec![0; sizes.len()];
                for i in (0..sizes.len()).rev() {
                    t[i] = j % sizes[i];
                    j /= sizes[i];
                }
                t
            })
            .collect();
        Ok(Self {
            graph,
            sizes,
            n_states,
            transitions,
            rewards,
            gamma,
            tuples,
        })
    }

    /// Random instance: Dirichlet(1) transition rows, rewards uniform in [−1, 1].
    pub fn random<R: Rng + ?Sized>(graph: Arc<BsnGraph>, sizes: Vec<usize>, n_states: usize, gamma: f64, rng: &mut R) -> Result<Self, TabularError> {
        let joint: usize = sizes.iter().product();
        let mut transitions = Vec::with_capacity(n_states * joint * n_states);
        for _ in 0..n_states * joint {
            transitions.extend(dirichlet(n_states, rng));
        }
        let rewards = (0..n_states * joint).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::new(graph, sizes, n_states, transitions, rewards, gamma)
    }

    pub fn graph(&self) -> &BsnGraph {
        &self.graph
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_joint(&self) -> usize {
        self.tuples.len()
    }

    /// Per-node actions of joint index `j`.
    pub fn tuple(&self, j: usize) -> &[usize] {
        &self.tuples[j]
    }

    pub fn reward(&self, s: usize, j: usize) -> f64 {
        self.rewards[s * self.n_joint() + j]
    }

    pub fn transition(&self, s: usize, j: usize, s_next: usize) -> f64 {
        self.transitions[(s * self.n_joint() + j) * self.n_states + s_next]
    }

    /// Number of parent-action configurations of node `i`.
    pub fn parent_configs(&self, i: usize) -> usize {
        self.graph.parents_of(i).iter().map(|&p| self.sizes[p]).product()
    }

    /// Mixed-radix code of node `i`'s parent actions within `tuple`.
    pub fn parent_config(&self, i: usize, tuple: &[usize]) -> usize {
        self.graph
            .parents_of(i)
            .iter()
            .fold(0, |acc, &p| acc * self.sizes[p] + tuple[p])
    }

    fn table_index(&self, i: usize, s: usize, c: usize, a: usize) -> usize {
        (s * self.parent_configs(i) + c) * self.sizes[i] + a
    }
}

fn dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    let mut row: Vec<f64> = draws.iter().map(|d| d / sum).collect();
    // Absorb rounding so the row sums to 1 within a few ulps.
    let total: f64 = row.iter().sum();
    row[n - 1] += 1.0 - total;
    row
}

impl FactorizedTabularPolicy {
    pub fn uniform(mdp: &TabularMdp) -> Self {
        let tables = (0..mdp.graph.len())
            .map(|i| {
                let k = mdp.sizes[i];
                vec![1.0 / k as f64; mdp.n_states * mdp.parent_configs(i) * k]
            })
            .collect();
        Self { tables }
    }

    /// Every conditional drawn from Dirichlet(1).
    pub fn random<R: Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R) -> Self {
        let tables = (0..mdp.graph.len())
            .map(|i| {
                let k = mdp.sizes[i];
                (0..mdp.n_states * mdp.parent_configs(i)).flat_map(|_| dirichlet(k, rng)).collect()
            })
            .collect();
        Self { tables }
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<(), TabularError> {
        if self.tables.len() != mdp.graph.len() {
            return Err(TabularError::Invalid("one table per node required".into()));
        }
        for (i, table) in self.tables.iter().enumerate() {
            let k = mdp.sizes[i];
            if table.len() != mdp.n_states * mdp.parent_configs(i) * k {
                return Err(TabularError::Invalid(format!("table {i} has the wrong size")));
            }
            for (row, chunk) in table.chunks(k).enumerate() {
                let sum: f64 = chunk.iter().sum();
                if chunk.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                    return Err(TabularError::Invalid(format!("node {i} conditional {row} is not a distribution")));
                }
            }
        }
        Ok(())
    }

    /// `πᵢ(aᵢ | s, parents)` for the node-`i` component of joint index `j`.
    pub fn conditional(&self, mdp: &TabularMdp, i: usize, s: usize, j: usize) -> f64 {
        let t = mdp.tuple(j);
        self.tables[i][mdp.table_index(i, s, mdp.parent_config(i, t), t[i])]
    }
}

/// Joint action distribution in state `s`, multiplied along topological order.
pub fn joint_policy_probs(mdp: &TabularMdp, policy: &FactorizedTabularPolicy, s: usize) -> Vec<f64> {
    (0..mdp.n_joint())
        .map(|j| mdp.graph.order().iter().fold(1.0, |acc, &i| acc * policy.conditional(mdp, i, s, j)))
        .collect()
}

/// `(1/m) Σᵢ Hᵢ(s)` for every state.
pub fn entropy_bonus(mdp: &TabularMdp, policy: &FactorizedTabularPolicy) -> Vec<f64> {
    let m = mdp.graph.len() as f64;
    (0..mdp.n_states)
        .map(|s| {
            let joint = joint_policy_probs(mdp, policy, s);
            let mut total = 0.0;
            for i in 0..mdp.graph.len() {
                // Hᵢ(s) = Σ_c P(c|s) H(πᵢ(·|s, c)), P(c|s) from the joint.
                let mut parent_mass = vec![0.0; mdp.parent_configs(i)];
                for (j, p) in joint.iter().enumerate() {
                    parent_mass[mdp.parent_config(i, mdp.tuple(j))] += p;
                }
                let k = mdp.sizes[i];
                for (c, w) in parent_mass.iter().enumerate() {
                    let base = mdp.table_index(i, s, c, 0);
                    let h: f64 = policy.tables[i][base..base + k].iter().map(|&p| entropy_term(p)).sum();
                    total += w * h;
                }
            }
            total / m
        })
        .collect()
}

/// `r_π(s, 𝒜) = r(s, 𝒜) + γ Σ_{s'} P(s'|s, 𝒜) bonus(s')`.
pub fn entropy_augmented_reward(mdp: &TabularMdp, policy: &FactorizedTabularPolicy) -> Vec<f64> {
    let bonus = entropy_bonus(mdp, policy);
    let (s_n, j_n) = (mdp.n_states, mdp.n_joint());
    let mut out = Vec::with_capacity(s_n * j_n);
    for s in 0..s_n {
        for j in 0..j_n {
            let next: f64 = (0..s_n).map(|t| mdp.transition(s, j, t) * bonus[t]).sum();
            out.push(mdp.reward(s, j) + mdp.gamma * next);
        }
    }
    out
}

fn backup_with(mdp: &TabularMdp, joints: &[Vec<f64>], r_pi: &[f64], q: &[f64]) -> Vec<f64> {
    let (s_n, j_n) = (mdp.n_states, mdp.n_joint());
    let v: Vec<f64> = (0..s_n)
        .map(|t| joints[t].iter().zip(&q[t * j_n..(t + 1) * j_n]).map(|(p, qv)| p * qv).sum())
        .collect();
    let mut out = Vec::with_capacity(s_n * j_n);
    for s in 0..s_n {
        for j in 0..j_n {
            let next: f64 = (0..s_n).map(|t| mdp.transition(s, j, t) * v[t]).sum();
            out.push(r_pi[s * j_n + j] + mdp.gamma * next);
        }
    }
    out
}

/// The soft Bellman operator `𝒯^π Q = r_π + γ E_{s'} E_{𝒜'∼π} Q(s', 𝒜')`.
pub fn soft_bellman_backup(mdp: &TabularMdp, policy: &FactorizedTabularPolicy, q: &[f64]) -> Vec<f64> {
    let joints: Vec<Vec<f64>> = (0..mdp.n_states).map(|s| joint_policy_probs(mdp, policy, s)).collect();
    backup_with(mdp, &joints, &entropy_augmented_reward(mdp, policy), q)
}

/// Iterates the soft Bellman backup from `Q = 0` until successive iterates
/// differ by less than `tol` in max-norm.
pub fn soft_policy_evaluation(mdp: &TabularMdp, policy: &FactorizedTabularPolicy, tol: f64) -> Evaluation {
    assert!(tol > 0.0, "tolerance must be positive");
    let joints: Vec<Vec<f64>> = (0..mdp.n_states).map(|s| joint_policy_probs(mdp, policy, s)).collect();
    let r_pi = entropy_augmented_reward(mdp, policy);
    let mut q = vec![0.0; r_pi.len()];
    let mut residuals = Vec::new();
    loop {
        let next = backup_with(mdp, &joints, &r_pi, &q);
        let res = max_abs_diff(&next, &q);
        q = next;
        residuals.push(res);
        if res < tol {
            return Evaluation {
                q,
                iterations: residuals.len(),
                residuals,
            };
        }
    }
}

/// Fixed point of the soft Bellman backup by a direct linear solve of
/// `(I − γ P_π) Q = r_π`.
pub fn soft_policy_evaluation_exact(mdp: &TabularMdp, policy: &FactorizedTabularPolicy) -> Result<Vec<f64>, TabularError> {
    let (s_n, j_n) = (mdp.n_states, mdp.n_joint());
    let n = s_n * j_n;
    let joints: Vec<Vec<f64>> = (0..s_n).map(|s| joint_policy_probs(mdp, policy, s)).collect();
    let mut a = DMatrix::<f64>::identity(n, n);
    for s in 0..s_n {
        for j in 0..j_n {
            let row = s * j_n + j;
            for t in 0..s_n {
                let p = mdp.gamma * mdp.transition(s, j, t);
                for (jn, pj) in joints[t].iter().enumerate() {
                    a[(row, t * j_n + jn)] -= p * pj;
                }
            }
        }
    }
    let b = DVector::from_vec(entropy_augmented_reward(mdp, policy));
    let x = a.lu().solve(&b).ok_or(TabularError::Singular)?;
    Ok(x.iter().copied().collect())
}

/// The joint Boltzmann target `∝ exp(m · Q(s, ·))` in state `s`.
pub fn boltzmann(mdp: &TabularMdp, q: &[f64], s: usize) -> Vec<f64> {
    let j_n = mdp.n_joint();
    let m = mdp.graph.len() as f64;
    let row = &q[s * j_n..(s + 1) * j_n];
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|v| (m * (v - max)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Boltzmann improvement projected onto the BSN: each node's conditional is
/// the Boltzmann joint's conditional of its action given its parents' actions.
pub fn soft_policy_improvement(mdp: &TabularMdp, q: &[f64]) -> FactorizedTabularPolicy {
    let mut tables: Vec<Vec<f64>> = (0..mdp.graph.len())
            .map(|i| vec![0.0; mdp.n_states * mdp.parent_configs(i) * mdp.sizes[i]])
            .collect();
    for s in 0..mdp.n_states {
        let b = boltzmann(mdp, q, s);
        for (j, p) in b.iter().enumerate() {
            let t = mdp.tuple(j);
            for (i, table) in tables.iter_mut().enumerate() {
                table[mdp.table_index(i, s, mdp.parent_config(i, t), t[i])] += p;
            }
        }
    }
    for (i, table) in tables.iter_mut().enumerate() {
        let k = mdp.sizes[i];
        for chunk in table.chunks_mut(k) {
            let z: f64 = chunk.iter().sum();
            if z > 0.0 {
                chunk.iter_mut().for_each(|p| *p /= z);
            } else {
                chunk.iter_mut().for_each(|p| *p = 1.0 / k as f64);
            }
        }
    }
    FactorizedTabularPolicy { tables }
}

/// Alternates exact evaluation and improvement from the uniform policy
/// until no conditional moves by `tol` or more.
pub fn soft_policy_iteration(mdp: &TabularMdp, tol: f64) -> Result<IterationResult, TabularError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut policy = FactorizedTabularPolicy::uniform(mdp);
    let mut q = soft_policy_evaluation_exact(mdp, &policy)?;
    let mut certificate = Vec::new();
    let mut policy_changes = Vec::new();
    for _ in 0..ITERATION_CAP {
        let next = soft_policy_improvement(mdp, &q);
        let change = policy
            .tables
            .iter()
            .zip(&next.tables)
            .map(|(a, b)| max_abs_diff(a, b))
            .fold(0.0, f64::max);
        let q_next = soft_policy_evaluation_exact(mdp, &next)?;
        certificate.push(q_next.iter().zip(&q).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min));
        policy_changes.push(change);
        policy = next;
        q = q_next;
        if change < tol {
            return Ok(IterationResult {
                q,
                policy,
                certificate,
                policy_changes,
            });
        }
    }
    let tail = policy_changes.len().saturating_sub(10);
    Err(TabularError::IterationCap {
        iterations: ITERATION_CAP,
        trace: policy_changes[tail..].to_vec(),
    })
}
