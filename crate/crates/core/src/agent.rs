//! The BSAC training loop: environment interaction, replay, and one fixed
//! sequence of gradient steps per update (q1, q2, v, sub-policies, target).

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsn::BsnGraph;
use crate::critic::{CriticError, CriticSet, TransitionBatch};
use crate::envs::{episode_seeds, Env, EnvError, EnvSpec};
use crate::ndmath::{adam_step, AdamState, Dense, Matrix, NdError};
use crate::policy::{JointAction, PolicyError, PolicySet};
use crate::rng::{stream, Stream, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("warmup incomplete: replay holds {have} transitions, a batch needs {need}")]
    WarmupIncomplete { have: usize, need: usize },
    #[error("non-finite {what} at update {update}: {detail}")]
    NonFinite { what: &'static str, update: u64, detail: String },
    #[error("transition {field} has {found} entries, expected {expected}")]
    Dim { field: &'static str, expected: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Shape(#[from] NdError),
    #[error("{0}")]
    Observer(String),
}

impl AgentError {
    /// Whether training diverged numerically rather than being misconfigured.
    pub fn is_non_finite(&self) -> bool {
        match self {
            AgentError::NonFinite { .. } | AgentError::Env(EnvError::NonFiniteAction(_)) | AgentError::Shape(NdError::NonFinite { .. }) => true,
            AgentError::Policy(p) | AgentError::Critic(CriticError::Policy(p)) => {
                matches!(p, PolicyError::NonFinite { .. } | PolicyError::NonFiniteLoss { .. })
            }
            AgentError::Critic(c) => matches!(c, CriticError::NonFinite { .. } | CriticError::Shape(NdError::NonFinite { .. })),
            _ => false,
        }
    }
}

/// Training hyperparameters. Unset fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    /// Preset name or path to a topology document.
    pub topology: String,
    pub seed: u64,
    pub total_steps: u64,
    /// Leading steps that take uniform random actions.
    pub start_steps: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub lr_v: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Multiplier on rewards; acts as an inverse entropy temperature.
    pub reward_scale: f64,
    pub target_update_interval: u64,
    pub gradient_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub detach_parent_actions: bool,
    pub hidden_units: usize,
    pub hidden_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "pendulum".into(),
            topology: "single".into(),
            seed: 0,
            total_steps: 100_000,
            start_steps: 1000,
            batch_size: 256,
            replay_capacity: 1_000_000,
            lr_v: 3e-4,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            reward_scale: 5.0,
            target_update_interval: 1,
            gradient_steps: 1,
            eval_interval: 5000,
            eval_episodes: 10,
            detach_parent_actions: false,
            hidden_units: 256,
            hidden_layers: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        for (name, v) in [("lr_v", self.lr_v), ("lr_q", self.lr_q), ("lr_pi", self.lr_pi), ("reward_scale", self.reward_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.total_steps < self.start_steps {
            return bad(format!("total_steps {} is below start_steps {}", self.total_steps, self.start_steps));
        }
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("replay_capacity", self.replay_capacity as u64),
            ("target_update_interval", self.target_update_interval),
            ("gradient_steps", self.gradient_steps),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes as u64),
            ("hidden_units", self.hidden_units as u64),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity is smaller than batch_size".into());
        }
        Ok(())
    }

    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_units; self.hidden_layers]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub pre_squash: Vec<f64>,
    /// Unscaled reward.
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub truncated: bool,
}

/// Fixed-capacity FIFO of transitions stored column-wise.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    len: usize,
    cursor: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    pre_squash: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    done: Vec<bool>,
    truncated: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            state_dim,
            action_dim,
            len: 0,
            cursor: 0,
            states: Vec::new(),
            actions: Vec::new(),
            pre_squash: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            done: Vec::new(),
            truncated: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends at the cursor, overwriting the oldest entry once full.
    pub fn push(&mut self, t: &Transition) -> Result<(), AgentError> {
        for (field, found, expected) in [
            ("state", t.state.len(), self.state_dim),
            ("next_state", t.next_state.len(), self.state_dim),
            ("action", t.action.len(), self.action_dim),
            ("pre_squash", t.pre_squash.len(), self.action_dim),
        ] {
            if found != expected {
                return Err(AgentError::Dim { field, expected, found });
            }
        }
        let i = self.cursor;
        if self.len < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.pre_squash.extend_from_slice(&t.pre_squash);
            self.rewards.push(t.reward);
            self.next_states.extend_from_slice(&t.next_state);
            self.done.push(t.done);
            self.truncated.push(t.truncated);
            self.len += 1;
        } else {
            let (s, a) = (self.state_dim, self.action_dim);
            self.states[i * s..(i + 1) * s].copy_from_slice(&t.state);
            self.actions[i * a..(i + 1) * a].copy_from_slice(&t.action);
            self.pre_squash[i * a..(i + 1) * a].copy_from_slice(&t.pre_squash);
            self.rewards[i] = t.reward;
            self.next_states[i * s..(i + 1) * s].copy_from_slice(&t.next_state);
            self.done[i] = t.done;
            self.truncated[i] = t.truncated;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Transition {
        assert!(i < self.len, "replay index {i} out of range");
        let (s, a) = (self.state_dim, self.action_dim);
        Transition {
            state: self.states[i * s..(i + 1) * s].to_vec(),
            action: self.actions[i * a..(i + 1) * a].to_vec(),
            pre_squash: self.pre_squash[i * a..(i + 1) * a].to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states[i * s..(i + 1) * s].to_vec(),
            done: self.done[i],
            truncated: self.truncated[i],
        }
    }

    /// `k` slot indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        (0..k).map(|_| rng.random_range(0..self.len)).collect()
    }

    /// Gathers slots into a batch with actions divided by `action_scale`.
    pub fn batch(&self, indices: &[usize], action_scale: &[f64]) -> TransitionBatch {
        let (s, a) = (self.state_dim, self.action_dim);
        let n = indices.len();
        let mut states = Matrix::zeros(n, s);
        let mut actions = Matrix::zeros(n, a);
        let mut next_states = Matrix::zeros(n, s);
        let mut rewards = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        for (r, &i) in indices.iter().enumerate() {
            states.row_mut(r).copy_from_slice(&self.states[i * s..(i + 1) * s]);
            next_states.row_mut(r).copy_from_slice(&self.next_states[i * s..(i + 1) * s]);
            for (k, out) in actions.row_mut(r).iter_mut().enumerate() {
                *out = self.actions[i * a + k] / action_scale[k];
            }
            rewards.push(self.rewards[i]);
            done.push(self.done[i]);
        }
        TransitionBatch {
            states,
            actions,
            rewards,
            next_states,
            done,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Number of updates performed so far, this one included.
    pub update: u64,
    pub loss_v: f64,
    pub loss_q1: f64,
    pub loss_q2: f64,
    pub loss_pi: f64,
    /// `−(1/m) Σᵢ log πᵢ` averaged over the policy batch.
    pub mean_sub_entropy: f64,
    pub grad_norm_v: f64,
    pub grad_norm_q1: f64,
    pub grad_norm_q2: f64,
    pub grad_norm_pi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Environment steps taken when the episode ended.
    pub env_step: u64,
    pub episode: u64,
    pub episode_return: f64,
    /// Mean return of the last (up to) 100 episodes, this one included.
    pub avg_return_100: f64,
    /// Most recent update's report; `None` before the first update.
    pub loss: Option<LossReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub env_step: u64,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalRecord>,
    pub updates: u64,
}

/// Hooks called while training; used to stream logs and checkpoints.
pub trait TrainObserver {
    fn on_episode(&mut self, _record: &EpisodeRecord) -> Result<(), AgentError> {
        Ok(())
    }
    fn on_eval(&mut self, _record: &EvalRecord) -> Result<(), AgentError> {
        Ok(())
    }
    /// After every environment step and its updates.
    fn on_step(&mut self, _env_step: u64, _agent: &Agent) -> Result<(), AgentError> {
        Ok(())
    }
}

impl TrainObserver for () {}

fn sq_norm(layers: &[Dense]) -> f64 {
    layers
        .iter()
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
        .map(|g| g * g)
        .sum()
}

/// Undiscounted returns of the noise-free policy on episodes reset from `seeds`.
pub fn evaluate(policies: &PolicySet, env: &mut dyn Env, seeds: &[u64]) -> Result<Vec<f64>, AgentError> {
    let mut returns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut state = env.reset(seed);
        let mut total = 0.0;
        loop {
            let action = policies.deterministic_action(&state)?;
            let step = env.step(&action)?;
            total += step.reward;
            state = step.state;
            if step.done || step.truncated {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: TrainConfig,
    spec: EnvSpec,
    pub policies: PolicySet,
    pub critics: CriticSet,
    opt_v: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    opt_pi: Vec<AdamState>,
    buffer: ReplayBuffer,
    action_rng: StreamRng,
    replay_rng: StreamRng,
    update_rng: StreamRng,
    updates: u64,
}

impl Agent {
    /// Builds networks from the `Init` stream of `config.seed`: sub-policies
    /// in topological order, then v, q1, q2. Learning rates may be zero
    /// here (frozen networks); [`TrainConfig::validate`] is stricter.
    pub fn new(config: TrainConfig, graph: Arc<BsnGraph>, spec: &EnvSpec) -> Result<Self, AgentError> {
        if graph.action_dim_total() != spec.action_dim {
            return Err(AgentError::Config(format!(
                "topology covers {} action dimensions, environment {:?} has {}",
                graph.action_dim_total(),
                spec.id,
                spec.action_dim
            )));
        }
        for (name, v) in [("lr_v", config.lr_v), ("lr_q", config.lr_q), ("lr_pi", config.lr_pi)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AgentError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if config.batch_size == 0 || config.replay_capacity == 0 {
            return Err(AgentError::Config("batch_size and replay_capacity must be positive".into()));
        }
        let hidden = config.hidden();
        let mut init = stream(config.seed, Stream::Init);
        let mut policies = PolicySet::new(graph, spec.state_dim, &spec.action_bound, &hidden, &mut init)?;
        policies.set_detach_parent_actions(config.detach_parent_actions);
        let critics = CriticSet::new(spec.state_dim, spec.action_dim, &hidden, config.gamma, config.tau, &mut init)?;
        let opt_pi = policies.subs().iter().map(|s| AdamState::new(&s.net)).collect();
        Ok(Self {
            opt_v: AdamState::new(&critics.v),
            opt_q1: AdamState::new(&critics.q1),
            opt_q2: AdamState::new(&critics.q2),
            opt_pi,
            buffer: ReplayBuffer::new(config.replay_capacity, spec.state_dim, spec.action_dim),
            action_rng: stream(config.seed, Stream::ActionNoise),
            replay_rng: stream(config.seed, Stream::Replay),
            update_rng: stream(config.seed, Stream::Update),
            updates: 0,
            spec: spec.clone(),
            policies,
            critics,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn act(&mut self, state: &[f64], mode: ActMode) -> Result<JointAction, AgentError> {
        Ok(match mode {
            ActMode::Stochastic => self.policies.sample_joint(state, &mut self.action_rng)?,
            ActMode::UniformRandom => self.policies.uniform_action(&mut self.action_rng),
            ActMode::Deterministic => self.policies.deterministic_joint(state)?,
        })
    }

    pub fn observe(&mut self, t: &Transition) -> Result<(), AgentError> {
        self.buffer.push(t)
    }

    /// One gradient step on every network, in the order q1, q2, v,
    /// sub-policies, then the target value network.
    pub fn update(&mut self) -> Result<LossReport, AgentError> {
        let need = self.config.batch_size;
        if self.buffer.len() < need {
            return Err(AgentError::WarmupIncomplete {
                have: self.buffer.len(),
                need,
            });
        }
        let step = self.updates + 1;
        let non_finite = |what: &'static str, detail: String| AgentError::NonFinite { what, update: step, detail };
        let idx = self.buffer.sample_indices(need, &mut self.replay_rng);
        let batch = self.buffer.batch(&idx, self.policies.action_scale());

        let q = self.critics.q_loss(&batch, self.config.reward_scale)?;
        if !(q.loss_q1.is_finite() && q.loss_q2.is_finite()) {
            return Err(non_finite("Q loss", format!("q1 {} q2 {}", q.loss_q1, q.loss_q2)));
        }
        adam_step(&mut self.critics.q1, &q.grads_q1, &mut self.opt_q1, self.config.lr_q).map_err(|e| non_finite("Q1 gradient", e.to_string()))?;
        adam_step(&mut self.critics.q2, &q.grads_q2, &mut self.opt_q2, self.config.lr_q).map_err(|e| non_finite("Q2 gradient", e.to_string()))?;

        let v = self.critics.value_loss(&self.policies, &batch.states, &mut self.update_rng)?;
        if !v.loss.is_finite() {
            return Err(non_finite("value loss", v.loss.to_string()));
        }
        adam_step(&mut self.critics.v, &v.grads, &mut self.opt_v, self.config.lr_v).map_err(|e| non_finite("value gradient", e.to_string()))?;

        let pi = self.policies.policy_loss(&self.critics.min_q(), &batch.states, &mut self.update_rng)?;
        if !pi.loss.is_finite() {
            return Err(non_finite("policy loss", pi.loss.to_string()));
        }
        let lr_pi = self.config.lr_pi;
        for ((sub, grads), opt) in self.policies.subs_mut().iter_mut().zip(&pi.grads).zip(&mut self.opt_pi) {
            adam_step(&mut sub.net, grads, opt, lr_pi).map_err(|e| non_finite("policy gradient", format!("{}: {e}", sub.node_id)))?;
        }

        if step.is_multiple_of(self.config.target_update_interval.max(1)) {
            self.critics.soft_update();
        }
        self.updates = step;
        Ok(LossReport {
            update: step,
            loss_v: v.loss,
            loss_q1: q.loss_q1,
            loss_q2: q.loss_q2,
            loss_pi: pi.loss,
            mean_sub_entropy: -pi.mean_log_prob,
            grad_norm_v: sq_norm(&v.grads).sqrt(),
            grad_norm_q1: sq_norm(&q.grads_q1).sqrt(),
            grad_norm_q2: sq_norm(&q.grads_q2).sqrt(),
            grad_norm_pi: pi.grads.iter().map(|g| sq_norm(g)).sum::<f64>().sqrt(),
        })
    }

    /// Runs `total_steps` environment steps. Evaluation runs on `eval_env`
    /// every `eval_interval` steps over a fixed set of reset seeds.
    pub fn train(&mut self, env: &mut dyn Env, eval_env: &mut dyn Env, observer: &mut dyn TrainObserver) -> Result<TrainingLog, AgentError> {
        let cfg = self.config.clone();
        let mut env_rng = stream(cfg.seed, Stream::Env);
        let eval_seeds = episode_seeds(cfg.seed, cfg.eval_episodes);
        let mut log = TrainingLog::default();
        let mut recent: VecDeque<f64> = VecDeque::with_capacity(100);
        let mut last_report: Option<LossReport> = None;
        let mut state = env.reset(env_rng.random());
        let mut episode_return = 0.0;
        for t in 1..=cfg.total_steps {
            let mode = if t <= cfg.start_steps { ActMode::UniformRandom } else { ActMode::Stochastic };
            let ja = self.act(&state, mode)?;
            let step = env.step(&ja.action)?;
            episode_return += step.reward;
            self.observe(&Transition {
                state: std::mem::take(&mut state),
                action: ja.action,
                pre_squash: ja.pre_squash,
                reward: step.reward,
                next_state: step.state.clone(),
                done: step.done,
                truncated: step.truncated,
            })?;
            state = step.state;
            if t > cfg.start_steps && self.buffer.len() >= cfg.batch_size {
                for _ in 0..cfg.gradient_steps {
                    last_report = Some(self.update()?);
                }
            }
            if step.done || step.truncated {
                if recent.len() == 100 {
                    recent.pop_front();
                }
                recent.push_back(episode_return);
                let record = EpisodeRecord {
                    env_step: t,
                    episode: log.episodes.len() as u64,
                    episode_return,
                    avg_return_100: recent.iter().sum::<f64>() / recent.len() as f64,
                    loss: last_report.clone(),
                };
                observer.on_episode(&record)?;
                log.episodes.push(record);
                state = env.reset(env_rng.random());
                episode_return = 0.0;
            }
            if t % cfg.eval_interval == 0 {
                let returns = evaluate(&self.policies, eval_env, &eval_seeds)?;
                let record = EvalRecord {
                    env_step: t,
                    mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
                    returns,
                };
                log::info!("step {t}: eval mean return {:.2}", record.mean_return);
                observer.on_eval(&record)?;
                log.evals.push(record);
            }
            observer.on_step(t, self)?;
        }
        log.updates = self.updates;
        Ok(log)
    }
}
