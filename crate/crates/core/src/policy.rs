//! Sub-policy actors arranged along a BSN.
//!
//! Each node owns a group of action dimensions and an MLP mapping
//! `state ⧺ parents' squashed actions` to a Gaussian mean and log-std per
//! owned dimension. A joint action is drawn node by node in topological
//! order with the reparameterization `a = scale · tanh(μ + σ·ε)`, so every
//! per-node log-density is exact and differentiable in the parameters of
//! the node and of its ancestors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsn::BsnGraph;
use crate::ndmath::{Dense, ForwardCache, Matrix, Mlp, NdError};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("sub-policy {node:?} produced a non-finite output")]
    NonFinite { node: String },
    #[error("non-finite policy loss at batch index {index}")]
    NonFiniteLoss { index: usize },
    #[error("state has {found} entries, policy expects {expected}")]
    StateDim { expected: usize, found: usize },
    #[error("joint action carries no pre-squash values; log-densities cannot be recomputed")]
    MissingPreSquash,
    #[error("policy set does not match topology: {0}")]
    Mismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Shape(#[from] NdError),
}

/// One node's conditional Gaussian policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPolicy {
    pub node_id: String,
    pub action_dims: Vec<usize>,
    pub net: Mlp,
}

/// A joint action together with what is needed to re-derive its density.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction {
    /// Environment-scale action, `|action[k]| < bound[k]`.
    pub action: Vec<f64>,
    /// Gaussian draws `u = μ + σε` before the tanh squash; empty if unknown.
    pub pre_squash: Vec<f64>,
    pub per_node_log_prob: BTreeMap<String, f64>,
}

impl JointAction {
    pub fn log_prob_sum(&self) -> f64 {
        self.per_node_log_prob.values().sum()
    }
}

/// Value of a joint action, differentiable in the (normalized) action.
pub trait ActionValue {
    /// Values for each row and their gradients with respect to the
    /// normalized action `tanh(u) ∈ (−1, 1)`.
    fn value_and_action_grad(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Matrix), NdError>;
}

/// Adapts a per-sample closure `(state, action) → (value, ∂value/∂action)`.
pub struct FnActionValue<F>(pub F);

impl<F> ActionValue for FnActionValue<F>
where
    F: Fn(&[f64], &[f64]) -> (f64, Vec<f64>),
{
    fn value_and_action_grad(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Matrix), NdError> {
        let mut values = Vec::with_capacity(states.rows());
        let mut grads = Matrix::zeros(actions.rows(), actions.cols());
        for b in 0..states.rows() {
            let (v, g) = (self.0)(states.row(b), actions.row(b));
            values.push(v);
            grads.row_mut(b).copy_from_slice(&g);
        }
        Ok((values, grads))
    }
}

/// Everything recorded while sampling one node over a batch.
#[derive(Debug, Clone)]
struct NodeTrace {
    cache: ForwardCache,
    log_std: Matrix,
    /// 1 where the raw log-std was inside the clamp range.
    log_std_live: Matrix,
    eps: Matrix,
    squashed: Matrix,
}

/// A reparameterized batch of joint actions with its backprop record.
#[derive(Debug, Clone)]
pub struct BatchSample {
    traces: Vec<NodeTrace>,
    /// Normalized joint actions `tanh(u)`, `B × action_dim`.
    pub squashed: Matrix,
    /// Pre-squash draws `u`, `B × action_dim`.
    pub pre_squash: Matrix,
    /// Per-node log-densities, `B × m` with columns in node-index order.
    pub log_prob: Matrix,
}

impl BatchSample {
    pub fn batch_size(&self) -> usize {
        self.squashed.rows()
    }

    /// `(1/m) Σᵢ log πᵢ` for row `b`.
    pub fn mean_log_prob(&self, b: usize) -> f64 {
        let row = self.log_prob.row(b);
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Distance of the nearest hidden pre-activation of any sub-policy to
    /// its ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.traces.iter().map(|t| t.cache.kink_margin()).fold(f64::INFINITY, f64::min)
    }
}

/// Output of [`PolicySet::policy_loss_with_noise`].
#[derive(Debug, Clone)]
pub struct PolicyLoss {
    pub loss: f64,
    /// Batch mean of `(1/m) Σᵢ log πᵢ`.
    pub mean_log_prob: f64,
    /// Parameter gradients, indexed like the sub-policies.
    pub grads: Vec<Vec<Dense>>,
}

/// One sub-policy per BSN node, indexed by node position in the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    graph: Arc<BsnGraph>,
    subs: Vec<SubPolicy>,
    state_dim: usize,
    action_scale: Vec<f64>,
    detach_parent_actions: bool,
    tanh_correction: bool,
}

/// Serializable form of a [`PolicySet`] without the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub state_dim: usize,
    pub action_scale: Vec<f64>,
    pub detach_parent_actions: bool,
    pub sub_policies: Vec<SubPolicy>,
}

/// `log(1 − tanh²u)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl PolicySet {
    /// Fresh sub-policies with hidden widths `hidden`, weights drawn from `rng`
    /// in topological order.
    pub fn new<R: Rng + ?Sized>(
        graph: Arc<BsnGraph>,
        state_dim: usize,
        action_bound: &[f64],
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        Self::build(graph, state_dim, action_bound, |sizes| Mlp::init(sizes, rng), hidden)
    }

    /// All-zero networks: μ = 0 and log σ = 0 everywhere.
    pub fn zeros(graph: Arc<BsnGraph>, state_dim: usize, action_bound: &[f64], hidden: &[usize]) -> Result<Self, PolicyError> {
        Self::build(graph, state_dim, action_bound, Mlp::zeros, hidden)
    }

    fn build(
        graph: Arc<BsnGraph>,
        state_dim: usize,
        action_bound: &[f64],
        mut make: impl FnMut(&[usize]) -> Mlp,
        hidden: &[usize],
    ) -> Result<Self, PolicyError> {
        if action_bound.len() != graph.action_dim_total() {
            return Err(PolicyError::Mismatch(format!(
                "{} action bounds for a topology over {} dimensions",
                action_bound.len(),
                graph.action_dim_total()
            )));
        }
        let mut nets: Vec<Option<Mlp>> = vec![None; graph.len()];
        for &i in graph.order() {
            let node = graph.node(i);
            let mut sizes = vec![state_dim + graph.parent_width_of(i)];
            sizes.extend_from_slice(hidden);
            sizes.push(2 * node.action_dims.len());
            nets[i] = Some(make(&sizes));
        }
        let subs = graph
            .nodes()
            .iter()
            .zip(nets)
            .map(|(node, net)| SubPolicy {
                node_id: node.id.clone(),
                action_dims: node.action_dims.clone(),
                net: net.expect("every node visited"),
            })
            .collect();
        Ok(Self {
            graph,
            subs,
            state_dim,
            action_scale: action_bound.to_vec(),
            detach_parent_actions: false,
            tanh_correction: true,
        })
    }

    pub fn from_params(graph: Arc<BsnGraph>, params: PolicyParams) -> Result<Self, PolicyError> {
        if params.sub_policies.len() != graph.len() {
            return Err(PolicyError::Mismatch(format!(
                "{} sub-policies for {} nodes",
                params.sub_policies.len(),
                graph.len()
            )));
        }
        if params.action_scale.len() != graph.action_dim_total() {
            return Err(PolicyError::Mismatch("action scale width".into()));
        }
        for (i, sub) in params.sub_policies.iter().enumerate() {
            let node = graph.node(i);
            if sub.node_id != node.id || sub.action_dims != node.action_dims {
                return Err(PolicyError::Mismatch(format!("sub-policy {i} is {:?}, node is {:?}", sub.node_id, node.id)));
            }
            let expected_in = params.state_dim + graph.parent_width_of(i);
            if sub.net.input_dim() != expected_in || sub.net.output_dim() != 2 * node.action_dims.len() {
                return Err(PolicyError::Mismatch(format!("network shape of {:?}", node.id)));
            }
        }
        Ok(Self {
            graph,
            subs: params.sub_policies,
            state_dim: params.state_dim,
            action_scale: params.action_scale,
            detach_parent_actions: params.detach_parent_actions,
            tanh_correction: true,
        })
    }

    pub fn to_params(&self) -> PolicyParams {
        PolicyParams {
            state_dim: self.state_dim,
            action_scale: self.action_scale.clone(),
            detach_parent_actions: self.detach_parent_actions,
            sub_policies: self.subs.clone(),
        }
    }

    pub fn graph(&self) -> &Arc<BsnGraph> {
        &self.graph
    }

    pub fn subs(&self) -> &[SubPolicy] {
        &self.subs
    }

    pub fn subs_mut(&mut self) -> &mut [SubPolicy] {
        &mut self.subs
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_scale.len()
    }

    pub fn action_scale(&self) -> &[f64] {
        &self.action_scale
    }

    pub fn detach_parent_actions(&self) -> bool {
        self.detach_parent_actions
    }

    /// Stop gradients at the parent-action inputs of every child.
    pub fn set_detach_parent_actions(&mut self, detach: bool) {
        self.detach_parent_actions = detach;
    }

    /// Test fixture: drop the tanh change-of-variables term from every
    /// log-density, producing deliberately wrong densities.
    #[doc(hidden)]
    pub fn corrupt_tanh_correction(&mut self) {
        self.tanh_correction = false;
    }

    fn node_input(&self, idx: usize, states: &Matrix, squashed: &Matrix) -> Result<Matrix, PolicyError> {
        let parents = self.graph.parents_of(idx);
        if parents.is_empty() {
            return Ok(states.clone());
        }
        let width = self.state_dim + self.graph.parent_width_of(idx);
        let mut input = Matrix::zeros(states.rows(), width);
        for b in 0..states.rows() {
            let row = input.row_mut(b);
            row[..self.state_dim].copy_from_slice(states.row(b));
            let mut col = self.state_dim;
            for &p in parents {
                for &d in &self.graph.node(p).action_dims {
                    row[col] = squashed[(b, d)];
                    col += 1;
                }
            }
        }
        Ok(input)
    }

    fn check_states(&self, states: &Matrix) -> Result<(), PolicyError> {
        if states.cols() != self.state_dim {
            return Err(PolicyError::StateDim {
                expected: self.state_dim,
                found: states.cols(),
            });
        }
        Ok(())
    }

    /// Mean and clamped log-std of node `idx` given normalized parent
    /// actions read from `squashed` (indexed by action dimension).
    pub fn node_gaussian(&self, idx: usize, state: &[f64], squashed: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        let states = Matrix::row_vector(state);
        self.check_states(&states)?;
        let input = self.node_input(idx, &states, &Matrix::row_vector(squashed))?;
        let out = self.subs[idx].net.predict_batch(&input)?;
        let d = self.subs[idx].action_dims.len();
        let mu = out.row(0)[..d].to_vec();
        let log_std = out.row(0)[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok((mu, log_std))
    }

    /// Standard-normal noise shaped for [`Self::sample_batch`]. Columns are
    /// action dimensions; draws are row-major.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix {
        let data = (0..rows * self.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_vec(rows, self.action_dim(), data).expect("sized by construction")
    }

    /// Reparameterized joint actions for a batch of states from fixed noise.
    pub fn sample_batch(&self, states: &Matrix, noise: &Matrix) -> Result<BatchSample, PolicyError> {
        self.check_states(states)?;
        let n = states.rows();
        let a_dim = self.action_dim();
        let mut squashed = Matrix::zeros(n, a_dim);
        let mut pre_squash = Matrix::zeros(n, a_dim);
        let mut log_prob = Matrix::zeros(n, self.graph.len());
        let mut traces: Vec<Option<NodeTrace>> = vec![None; self.graph.len()];
        for &i in self.graph.order() {
            let sub = &self.subs[i];
            let d = sub.action_dims.len();
            let input = self.node_input(i, states, &squashed)?;
            let (out, cache) = sub.net.forward_batch(&input)?;
            if !out.is_finite() {
                return Err(PolicyError::NonFinite { node: sub.node_id.clone() });
            }
            let mut log_std = Matrix::zeros(n, d);
            let mut live = Matrix::zeros(n, d);
            let mut eps = Matrix::zeros(n, d);
            let mut node_sq = Matrix::zeros(n, d);
            for b in 0..n {
                let mut lp = 0.0;
                for (j, &dim) in sub.action_dims.iter().enumerate() {
                    let mu = out[(b, j)];
                    let raw = out[(b, d + j)];
                    let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                    let e = noise[(b, dim)];
                    let u = mu + ls.exp() * e;
                    let t = u.tanh();
                    log_std[(b, j)] = ls;
                    live[(b, j)] = if raw > LOG_STD_MIN && raw < LOG_STD_MAX { 1.0 } else { 0.0 };
                    eps[(b, j)] = e;
                    node_sq[(b, j)] = t;
                    squashed[(b, dim)] = t;
                    pre_squash[(b, dim)] = u;
                    lp += -0.5 * e * e - ls - HALF_LOG_2PI - self.action_scale[dim].ln();
                    if self.tanh_correction {
                        lp -= log_one_minus_tanh_sq(u);
                    }
                }
                if !lp.is_finite() {
                    return Err(PolicyError::NonFinite { node: sub.node_id.clone() });
                }
                log_prob[(b, i)] = lp;
            }
            traces[i] = Some(NodeTrace {
                cache,
                log_std,
                log_std_live: live,
                eps,
                squashed: node_sq,
            });
        }
        Ok(BatchSample {
            traces: traces.into_iter().map(|t| t.expect("every node sampled")).collect(),
            squashed,
            pre_squash,
            log_prob,
        })
    }

    /// Backpropagates `Σ_b Σᵢ d_log_prob[b,i]·log πᵢ(b) + Σ_b ⟨d_action[b], tanh(u_b)⟩`
    /// to every sub-policy's parameters, holding the noise fixed.
    pub fn backward(&self, sample: &BatchSample, d_log_prob: &Matrix, d_action: &Matrix) -> Result<Vec<Vec<Dense>>, PolicyError> {
        let n = sample.batch_size();
        let mut ga = d_action.clone();
        let mut grads: Vec<Option<Vec<Dense>>> = vec![None; self.graph.len()];
        for &i in self.graph.order().iter().rev() {
            let sub = &self.subs[i];
            let trace = &sample.traces[i];
            let d = sub.action_dims.len();
            let mut out_grad = Matrix::zeros(n, 2 * d);
            for b in 0..n {
                let w = d_log_prob[(b, i)];
                for (j, &dim) in sub.action_dims.iter().enumerate() {
                    let t = trace.squashed[(b, j)];
                    let mut du = ga[(b, dim)] * (1.0 - t * t);
                    if self.tanh_correction {
                        // d/du [−log(1 − tanh²u)] = 2 tanh u
                        du += w * 2.0 * t;
                    }
                    let sigma_eps = trace.log_std[(b, j)].exp() * trace.eps[(b, j)];
                    out_grad[(b, j)] = du;
                    out_grad[(b, d + j)] = (du * sigma_eps - w) * trace.log_std_live[(b, j)];
                }
            }
            let g = sub.net.backward_batch(&trace.cache, &out_grad)?;
            if !self.detach_parent_actions {
                let mut col = self.state_dim;
                for &p in self.graph.parents_of(i) {
                    for &dim in &self.graph.node(p).action_dims {
                        for b in 0..n {
                            ga[(b, dim)] += g.input[(b, col)];
                        }
                        col += 1;
                    }
                }
            }
            grads[i] = Some(g.layers);
        }
        Ok(grads.into_iter().map(|g| g.expect("every node visited")).collect())
    }

    /// Draws one joint action for `state`.
    pub fn sample_joint<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<JointAction, PolicyError> {
        let states = Matrix::row_vector(state);
        let noise = self.draw_noise(1, rng);
        let sample = self.sample_batch(&states, &noise)?;
        Ok(self.joint_action_from(&sample, 0))
    }

    fn joint_action_from(&self, sample: &BatchSample, b: usize) -> JointAction {
        let action = sample
            .squashed
            .row(b)
            .iter()
            .zip(&self.action_scale)
            .map(|(t, s)| t * s)
            .collect();
        let per_node_log_prob = self
            .subs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.node_id.clone(), sample.log_prob[(b, i)]))
            .collect();
        JointAction {
            action,
            pre_squash: sample.pre_squash.row(b).to_vec(),
            per_node_log_prob,
        }
    }

    /// Recomputes per-node log-densities of `action` from its pre-squash values.
    /// Returns `(1/m) Σᵢ log πᵢ` and the per-node map.
    pub fn log_prob_joint(&self, state: &[f64], action: &JointAction) -> Result<(f64, BTreeMap<String, f64>), PolicyError> {
        if action.pre_squash.len() != self.action_dim() {
            return Err(PolicyError::MissingPreSquash);
        }
        let states = Matrix::row_vector(state);
        self.check_states(&states)?;
        let squashed = Matrix::row_vector(&action.pre_squash.iter().map(|u| u.tanh()).collect::<Vec<_>>());
        let mut per_node = BTreeMap::new();
        let mut total = 0.0;
        for &i in self.graph.order() {
            let sub = &self.subs[i];
            let d = sub.action_dims.len();
            let input = self.node_input(i, &states, &squashed)?;
            let out = sub.net.predict_batch(&input)?;
            let mut lp = 0.0;
            for (j, &dim) in sub.action_dims.iter().enumerate() {
                let mu = out[(0, j)];
                let ls = out[(0, d + j)].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let u = action.pre_squash[dim];
                let z = (u - mu) / ls.exp();
                lp += -0.5 * z * z - ls - HALF_LOG_2PI - self.action_scale[dim].ln();
                if self.tanh_correction {
                    lp -= log_one_minus_tanh_sq(u);
                }
            }
            if !lp.is_finite() {
                return Err(PolicyError::NonFinite { node: sub.node_id.clone() });
            }
            total += lp;
            per_node.insert(sub.node_id.clone(), lp);
        }
        Ok((total / self.graph.len() as f64, per_node))
    }

    /// Noise-free action `scale · tanh(μ)`, parents fed their own noise-free actions.
    pub fn deterministic_action(&self, state: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.deterministic_joint(state)?.action)
    }

    /// The noise-free joint action with `pre_squash = μ` and the per-node
    /// log-densities evaluated there.
    pub fn deterministic_joint(&self, state: &[f64]) -> Result<JointAction, PolicyError> {
        let states = Matrix::row_vector(state);
        let noise = Matrix::zeros(1, self.action_dim());
        let sample = self.sample_batch(&states, &noise)?;
        Ok(self.joint_action_from(&sample, 0))
    }

    /// Policy objective `mean_b[(1/m) Σᵢ log πᵢ(a_i|s, pa) − Q(s, 𝒜)]` with
    /// fresh reparameterized actions drawn from `rng`.
    pub fn policy_loss<R: Rng + ?Sized>(&self, critic: &dyn ActionValue, states: &Matrix, rng: &mut R) -> Result<PolicyLoss, PolicyError> {
        let noise = self.draw_noise(states.rows(), rng);
        self.policy_loss_with_noise(critic, states, &noise)
    }

    /// [`Self::policy_loss`] with the noise supplied (common random numbers).
    pub fn policy_loss_with_noise(&self, critic: &dyn ActionValue, states: &Matrix, noise: &Matrix) -> Result<PolicyLoss, PolicyError> {
        let n = states.rows();
        if n == 0 {
            return Err(PolicyError::EmptyBatch);
        }
        let m = self.graph.len() as f64;
        let sample = self.sample_batch(states, noise)?;
        let (q, dq) = critic.value_and_action_grad(states, &sample.squashed)?;
        let mut loss = 0.0;
        let mut mean_lp = 0.0;
        for b in 0..n {
            let lp = sample.mean_log_prob(b);
            let term = lp - q[b];
            if !term.is_finite() {
                return Err(PolicyError::NonFiniteLoss { index: b });
            }
            loss += term;
            mean_lp += lp;
        }
        let inv_n = 1.0 / n as f64;
        let mut d_log_prob = Matrix::zeros(n, self.graph.len());
        d_log_prob.as_mut_slice().iter_mut().for_each(|v| *v = inv_n / m);
        let mut d_action = dq;
        d_action.as_mut_slice().iter_mut().for_each(|v| *v *= -inv_n);
        let grads = self.backward(&sample, &d_log_prob, &d_action)?;
        Ok(PolicyLoss {
            loss: loss * inv_n,
            mean_log_prob: mean_lp * inv_n,
            grads,
        })
    }

    /// Uniform action over the bounded box, with its (uniform) density.
    pub fn uniform_action<R: Rng + ?Sized>(&self, rng: &mut R) -> JointAction {
        let squashed: Vec<f64> = (0..self.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let action = squashed.iter().zip(&self.action_scale).map(|(t, s)| t * s).collect();
        let pre_squash = squashed.iter().map(|t: &f64| t.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()).collect();
        let per_node_log_prob = self
            .subs
            .iter()
            .map(|s| {
                let lp = s.action_dims.iter().map(|&d| -(2.0 * self.action_scale[d]).ln()).sum();
                (s.node_id.clone(), lp)
            })
            .collect();
        JointAction {
            action,
            pre_squash,
            per_node_log_prob,
        }
    }

    /// Log-density of a standard-normal-driven draw; exposed for oracles.
    pub fn gaussian_log_density(u: f64, mu: f64, log_std: f64) -> f64 {
        let z = (u - mu) / log_std.exp();
        -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
    }
}
