use std::path::Path;
use std::sync::Arc;

use bsac_core::agent::{Agent, TrainConfig};
use bsac_core::bsn::BsnGraph;
use bsac_core::critic::CriticSet;
use bsac_core::envs::{ChainLqrEnv, EnvSpec, LqrController};
use bsac_core::ndmath::Matrix;
use bsac_core::policy::{PolicyParams, PolicySet};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A saved controller: either a trained agent or an exported Riccati gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Checkpoint {
    Agent(AgentCheckpoint),
    Lqr(LqrCheckpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub env: String,
    pub env_step: u64,
    pub updates: u64,
    pub config: TrainConfig,
    pub topology: BsnGraph,
    pub policy: PolicyParams,
    pub critics: CriticSet,
}

/// Linear state feedback `u = clip(−K x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrCheckpoint {
    pub env: String,
    pub gain: Vec<Vec<f64>>,
    pub bound: Vec<f64>,
}

/// Something that maps states to actions deterministically.
pub enum Controller {
    Policy(PolicySet),
    Lqr(LqrController),
}

impl Controller {
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>, CliError> {
        match self {
            Controller::Policy(p) => p.deterministic_action(state).map_err(|e| CliError::Shape(e.to_string())),
            Controller::Lqr(c) => Ok(c.act(state)),
        }
    }
}

impl Checkpoint {
    pub fn from_agent(agent: &Agent, env_step: u64) -> Self {
        Checkpoint::Agent(AgentCheckpoint {
            env: agent.config().env.clone(),
            env_step,
            updates: agent.updates(),
            config: agent.config().clone(),
            topology: agent.policies.graph().as_ref().clone(),
            policy: agent.policies.to_params(),
            critics: agent.critics.clone(),
        })
    }

    pub fn lqr(env_id: &str, env: &ChainLqrEnv) -> Result<Self, CliError> {
        let c = LqrController::for_chain(env).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Checkpoint::Lqr(LqrCheckpoint {
            env: env_id.to_string(),
            gain: c.gain.to_rows(),
            bound: c.bound,
        }))
    }

    pub fn env(&self) -> &str {
        match self {
            Checkpoint::Agent(a) => &a.env,
            Checkpoint::Lqr(l) => &l.env,
        }
    }

    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        // Write then rename so an interrupted save never clobbers the previous file.
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_text()).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Shape(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the controller and checks it against `spec`.
    pub fn controller(&self, spec: &EnvSpec) -> Result<Controller, CliError> {
        match self {
            Checkpoint::Agent(a) => {
                let policies =
                    PolicySet::from_params(Arc::new(a.topology.clone()), a.policy.clone()).map_err(|e| CliError::Shape(e.to_string()))?;
                if policies.state_dim() != spec.state_dim || policies.action_dim() != spec.action_dim {
                    return Err(CliError::Shape(format!(
                        "checkpoint maps {} states to {} actions, {} has {} and {}",
                        policies.state_dim(),
                        policies.action_dim(),
                        spec.id,
                        spec.state_dim,
                        spec.action_dim
                    )));
                }
                Ok(Controller::Policy(policies))
            }
            Checkpoint::Lqr(l) => {
                let rows = l.gain.len();
                let gain = Matrix::from_rows(&l.gain).map_err(|e| CliError::Shape(e.to_string()))?;
                if rows != spec.action_dim || gain.cols() != spec.state_dim || l.bound.len() != rows {
                    return Err(CliError::Shape(format!(
                        "gain is {rows}×{} with {} bounds, {} needs {}×{}",
                        gain.cols(),
                        l.bound.len(),
                        spec.id,
                        spec.action_dim,
                        spec.state_dim
                    )));
                }
                Ok(Controller::Lqr(LqrController { gain, bound: l.bound.clone() }))
            }
        }
    }
}
