//! Soft value network with its Polyak-averaged target, twin soft Q networks,
//! and their regression losses.
//!
//! Q networks read `state ⧺ normalized action`, where the normalized action
//! is `action / bound ∈ (−1, 1)`, the same quantity the policy emits before
//! scaling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::{Dense, Matrix, Mlp, NdError};
use crate::policy::{ActionValue, PolicyError, PolicySet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticError {
    #[error("non-finite {what} at batch index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Shape(#[from] NdError),
}

/// A mini-batch of transitions in network-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Matrix,
    /// Normalized actions `action / bound`.
    pub actions: Matrix,
    /// Unscaled rewards.
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    /// Terminal flags; time-limit truncations are not terminal.
    pub done: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSet {
    pub v: Mlp,
    pub v_target: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub gamma: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct ValueLoss {
    pub loss: f64,
    pub grads: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct QLoss {
    pub loss_q1: f64,
    pub loss_q2: f64,
    pub grads_q1: Vec<Dense>,
    pub grads_q2: Vec<Dense>,
}

fn check_rates(gamma: f64, tau: f64) -> Result<(), CriticError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CriticError::Invalid(format!("discount {gamma} outside [0, 1)")));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(CriticError::Invalid(format!("target smoothing {tau} outside (0, 1]")));
    }
    Ok(())
}

/// `½ (pred − target)²` averaged over rows, with the gradient on `pred`.
fn half_mse(pred: &Matrix, target: &[f64], what: &'static str) -> Result<(f64, Matrix), CriticError> {
    let n = target.len();
    let mut grad = Matrix::zeros(n, 1);
    let mut loss = 0.0;
    for (b, &y) in target.iter().enumerate() {
        let r = pred[(b, 0)] - y;
        if !r.is_finite() {
            return Err(CriticError::NonFinite { what, index: b });
        }
        loss += 0.5 * r * r;
        grad[(b, 0)] = r / n as f64;
    }
    Ok((loss / n as f64, grad))
}

impl CriticSet {
    /// Fresh networks; the target value network starts as an exact copy.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        gamma: f64,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self, CriticError> {
        check_rates(gamma, tau)?;
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(1);
            s
        };
        let v = Mlp::init(&sizes(state_dim), rng);
        let q1 = Mlp::init(&sizes(state_dim + action_dim), rng);
        let q2 = Mlp::init(&sizes(state_dim + action_dim), rng);
        Ok(Self {
            v_target: v.clone(),
            v,
            q1,
            q2,
            gamma,
            tau,
        })
    }

    /// Checks shape agreement and rate ranges, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), CriticError> {
        check_rates(self.gamma, self.tau)?;
        if !self.v.same_shape(&self.v_target) {
            return Err(CriticError::Invalid("target value network shape differs from value network".into()));
        }
        if !self.q1.same_shape(&self.q2) {
            return Err(CriticError::Invalid("twin Q networks differ in shape".into()));
        }
        if self.v.output_dim() != 1 || self.q1.output_dim() != 1 {
            return Err(CriticError::Invalid("critic heads must be scalar".into()));
        }
        Ok(())
    }

    /// `min(q1, q2)` per row.
    fn twin_min(&self, inputs: &Matrix) -> Result<Vec<f64>, CriticError> {
        let a = self.q1.predict_batch(inputs)?;
        let b = self.q2.predict_batch(inputs)?;
        Ok((0..inputs.rows()).map(|r| a[(r, 0)].min(b[(r, 0)])).collect())
    }

    /// Single-sample soft value estimate for each state from fixed noise:
    /// `min(q1, q2)(s, 𝒜) − (1/m) Σᵢ log πᵢ`.
    pub fn soft_value_targets_with_noise(&self, policies: &PolicySet, states: &Matrix, noise: &Matrix) -> Result<Vec<f64>, CriticError> {
        let sample = policies.sample_batch(states, noise)?;
        let q = self.twin_min(&states.hcat(&sample.squashed)?)?;
        let mut out = Vec::with_capacity(q.len());
        for (b, qb) in q.into_iter().enumerate() {
            let t = qb - sample.mean_log_prob(b);
            if !t.is_finite() {
                return Err(CriticError::NonFinite { what: "soft value target", index: b });
            }
            out.push(t);
        }
        Ok(out)
    }

    /// One fresh-action soft value estimate for `state`.
    pub fn soft_value_target<R: Rng + ?Sized>(&self, policies: &PolicySet, state: &[f64], rng: &mut R) -> Result<f64, CriticError> {
        let noise = policies.draw_noise(1, rng);
        Ok(self.soft_value_targets_with_noise(policies, &Matrix::row_vector(state), &noise)?[0])
    }

    /// `mean ½(V_ψ(s) − target(s))²` with the target held constant.
    pub fn value_loss<R: Rng + ?Sized>(&self, policies: &PolicySet, states: &Matrix, rng: &mut R) -> Result<ValueLoss, CriticError> {
        let noise = policies.draw_noise(states.rows(), rng);
        self.value_loss_with_noise(policies, states, &noise)
    }

    pub fn value_loss_with_noise(&self, policies: &PolicySet, states: &Matrix, noise: &Matrix) -> Result<ValueLoss, CriticError> {
        if states.rows() == 0 {
            return Err(CriticError::EmptyBatch);
        }
        let targets = self.soft_value_targets_with_noise(policies, states, noise)?;
        self.value_loss_against(states, &targets)
    }

    /// Value regression against explicit targets.
    pub fn value_loss_against(&self, states: &Matrix, targets: &[f64]) -> Result<ValueLoss, CriticError> {
        if targets.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        let (pred, cache) = self.v.forward_batch(states)?;
        let (loss, grad) = half_mse(&pred, targets, "value loss")?;
        let g = self.v.backward_batch(&cache, &grad)?;
        Ok(ValueLoss { loss, grads: g.layers })
    }

    /// Soft Bellman regression targets `r_scaled + γ (1 − done) V_ψ̄(s')`.
    pub fn q_targets(&self, batch: &TransitionBatch, reward_scale: f64) -> Result<Vec<f64>, CriticError> {
        let v_next = self.v_target.predict_batch(&batch.next_states)?;
        let mut y = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let mut t = reward_scale * batch.rewards[b];
            if !batch.done[b] {
                t += self.gamma * v_next[(b, 0)];
            }
            if !t.is_finite() {
                return Err(CriticError::NonFinite { what: "Q target", index: b });
            }
            y.push(t);
        }
        Ok(y)
    }

    /// Each twin's `mean ½(Q_θᵢ(s, 𝒜) − y)²` with `y` held constant.
    pub fn q_loss(&self, batch: &TransitionBatch, reward_scale: f64) -> Result<QLoss, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        let y = self.q_targets(batch, reward_scale)?;
        let inputs = batch.states.hcat(&batch.actions)?;
        let (p1, c1) = self.q1.forward_batch(&inputs)?;
        let (loss_q1, g1) = half_mse(&p1, &y, "Q1 loss")?;
        let grads_q1 = self.q1.backward_batch(&c1, &g1)?.layers;
        let (p2, c2) = self.q2.forward_batch(&inputs)?;
        let (loss_q2, g2) = half_mse(&p2, &y, "Q2 loss")?;
        let grads_q2 = self.q2.backward_batch(&c2, &g2)?.layers;
        Ok(QLoss {
            loss_q1,
            loss_q2,
            grads_q1,
            grads_q2,
        })
    }

    /// `ψ̄ ← τψ + (1 − τ)ψ̄`, elementwise.
    pub fn soft_update(&mut self) {
        let tau = self.tau;
        for (t, s) in self.v_target.layers_mut().iter_mut().zip(self.v.layers()) {
            for (a, b) in t.weight.as_mut_slice().iter_mut().zip(s.weight.as_slice()) {
                *a = tau * b + (1.0 - tau) * *a;
            }
            for (a, b) in t.bias.iter_mut().zip(&s.bias) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }

    /// The twin minimum as a differentiable action-value for the policy loss.
    pub fn min_q(&self) -> MinQ<'_> {
        MinQ(self)
    }
}

/// `min(q1, q2)` with gradients taken through whichever twin is smaller.
pub struct MinQ<'a>(&'a CriticSet);

impl ActionValue for MinQ<'_> {
    fn value_and_action_grad(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Matrix), NdError> {
        let critics = self.0;
        let inputs = states.hcat(actions)?;
        let (a, ca) = critics.q1.forward_batch(&inputs)?;
        let (b, cb) = critics.q2.forward_batch(&inputs)?;
        let n = inputs.rows();
        let mut values = Vec::with_capacity(n);
        let mut ga = Matrix::zeros(n, 1);
        let mut gb = Matrix::zeros(n, 1);
        for r in 0..n {
            if b[(r, 0)] < a[(r, 0)] {
                values.push(b[(r, 0)]);
                gb[(r, 0)] = 1.0;
            } else {
                values.push(a[(r, 0)]);
                ga[(r, 0)] = 1.0;
            }
        }
        let da = critics.q1.input_grad_batch(&ca, &ga)?;
        let db = critics.q2.input_grad_batch(&cb, &gb)?;
        let s = states.cols();
        let mut grad = Matrix::zeros(n, actions.cols());
        for r in 0..n {
            for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
                *g = da[(r, s + c)] + db[(r, s + c)];
            }
        }
        Ok((values, grad))
    }
}
