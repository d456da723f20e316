use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_action, Env, EnvError, EnvSpec, Step};

/// Torque-limited pendulum swing-up. Observation `(cos θ, sin θ, ω)` with
/// θ = 0 upright; reward `−(θ̂² + 0.1ω² + 0.001u²)` on the pre-step state.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    steps: usize,
    clipped: u64,
}

impl PendulumEnv {
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                id: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                action_bound: vec![Self::MAX_TORQUE],
                max_episode_steps: 200,
                dt: 0.05,
            },
            theta: 0.0,
            omega: 0.0,
            steps: 0,
            clipped: 0,
        }
    }

    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = theta;
        self.omega = omega.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.steps = 0;
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn angular_velocity(&self) -> f64 {
        self.omega
    }

    /// One semi-implicit Euler step of the raw dynamics with step `dt`.
    pub fn integrate(theta: f64, omega: f64, torque: f64, dt: f64) -> (f64, f64) {
        let g = Self::GRAVITY;
        let (m, l) = (Self::MASS, Self::LENGTH);
        let accel = 3.0 * g / (2.0 * l) * theta.sin() + 3.0 / (m * l * l) * torque;
        let omega = (omega + accel * dt).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        (theta + omega * dt, omega)
    }
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self::new()
    }
}

/// Wraps an angle into `[−π, π)`.
pub(crate) fn normalize_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Env for PendulumEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // θ uniform on (−π, π]
        self.theta = PI - rng.random::<f64>() * 2.0 * PI;
        self.omega = rng.random_range(-1.0..=1.0);
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if self.steps >= self.spec.max_episode_steps {
            return Err(EnvError::EpisodeOver);
        }
        let (u, clipped) = clip_action(action, &self.spec.action_bound, &self.spec.id)?;
        self.clipped += clipped as u64;
        let u = u[0];
        let th = normalize_angle(self.theta);
        let reward = -(th * th + 0.1 * self.omega * self.omega + 0.001 * u * u);
        let (theta, omega) = Self::integrate(self.theta, self.omega, u, self.spec.dt);
        self.theta = theta;
        self.omega = omega;
        self.steps += 1;
        Ok(Step {
            state: self.observe(),
            reward,
            done: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}
