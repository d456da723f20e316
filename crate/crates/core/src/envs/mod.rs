//! Seedable continuous-control environments with bounded, factorizable
//! action spaces, plus an LQR oracle for the linear chain task.

mod chain_lqr;
mod lqr;
mod pendulum;

pub use chain_lqr::ChainLqrEnv;
pub use lqr::{lqr_optimal_return, solve_dare, LqrController, RiccatiSolution};
pub use pendulum::PendulumEnv;

use rand::Rng;
use thiserror::Error;

use crate::rng::{stream, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment {0:?} (known: pendulum, chain-lqr-3, chain-lqr-6)")]
    Unknown(String),
    #[error("action has {found} entries, environment expects {expected}")]
    ActionDim { expected: usize, found: usize },
    #[error("non-finite action entry at index {0}")]
    NonFiniteAction(usize),
    #[error("step called on a finished episode; call reset first")]
    EpisodeOver,
    #[error("Riccati iteration did not converge within {iterations} iterations (last change {residual:e})")]
    RiccatiDiverged { iterations: usize, residual: f64 },
    #[error("{0}")]
    Linalg(String),
}

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Symmetric bound per action dimension: `|a[k]| ≤ action_bound[k]`.
    pub action_bound: Vec<f64>,
    pub max_episode_steps: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// Failure/terminal state reached. Neither shipped task has one.
    pub done: bool,
    /// Episode cut by the time limit.
    pub truncated: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    /// Deterministic start state for `seed`; zeroes the step counter.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advances one step. Out-of-bound actions are clipped with a warning.
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
    fn observe(&self) -> Vec<f64>;
    /// Number of actions clipped since construction.
    fn clipped_actions(&self) -> u64;
}

pub const ENV_IDS: [&str; 3] = ["pendulum", "chain-lqr-3", "chain-lqr-6"];

pub fn make_env(id: &str) -> Result<Box<dyn Env>, EnvError> {
    match id {
        "pendulum" => Ok(Box::new(PendulumEnv::new())),
        "chain-lqr-3" => Ok(Box::new(ChainLqrEnv::new(3))),
        "chain-lqr-6" => Ok(Box::new(ChainLqrEnv::new(6))),
        other => Err(EnvError::Unknown(other.to_string())),
    }
}

/// Reset seeds for a batch of evaluation episodes, derived from one seed.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = stream(seed, Stream::Eval);
    (0..episodes).map(|_| rng.random()).collect()
}

/// Validates and clips an action in place; returns whether anything was clipped.
pub(crate) fn clip_action(action: &[f64], bounds: &[f64], id: &str) -> Result<(Vec<f64>, bool), EnvError> {
    if action.len() != bounds.len() {
        return Err(EnvError::ActionDim {
            expected: bounds.len(),
            found: action.len(),
        });
    }
    let mut clipped = false;
    let mut out = Vec::with_capacity(action.len());
    for (k, (&a, &b)) in action.iter().zip(bounds).enumerate() {
        if !a.is_finite() {
            return Err(EnvError::NonFiniteAction(k));
        }
        if a.abs() > b {
            clipped = true;
            out.push(a.clamp(-b, b));
        } else {
            out.push(a);
        }
    }
    if clipped {
        log::warn!("{id}: action {action:?} outside bounds {bounds:?}, clipped");
    }
    Ok((out, clipped))
}

/// Runs full episodes with a state-feedback controller and returns each
/// episode's undiscounted return.
pub fn rollout_returns<F>(env: &mut dyn Env, seeds: &[u64], mut controller: F) -> Result<Vec<f64>, EnvError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut returns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut state = env.reset(seed);
        let mut total = 0.0;
        loop {
            let action = controller(&state);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry() {
        for id in ENV_IDS {
            let env = make_env(id).unwrap();
            assert_eq!(env.spec().id, id);
            assert!(env.spec().action_bound.iter().all(|b| b.is_finite() && *b > 0.0));
        }
        assert!(make_env("hopper").is_err());
    }

    #[test]
    fn episode_seeds_repeat() {
        assert_eq!(episode_seeds(3, 5), episode_seeds(3, 5));
        assert_ne!(episode_seeds(3, 5), episode_seeds(4, 5));
    }

    #[test]
    fn bad_actions_rejected() {
        let mut env = make_env("pendulum").unwrap();
        env.reset(0);
        assert_eq!(env.step(&[f64::NAN]), Err(EnvError::NonFiniteAction(0)));
        assert!(matches!(env.step(&[0.0, 1.0]), Err(EnvError::ActionDim { .. })));
        env.step(&[5.0]).unwrap();
        assert_eq!(env.clipped_actions(), 1);
    }
}
