use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_action, Env, EnvError, EnvSpec, Step};
use crate::ndmath::Matrix;

/// `m` unit-mass carts on a line, each pushed by its own force `uᵢ ∈ [−1, 1]`
/// and coupled to its neighbours by springs of stiffness κ.
///
/// State is `(p₁…p_m, v₁…v_m)`. One step updates positions with the old
/// velocities, then velocities with the new positions:
///
/// ```text
/// p' = p + dt·v
/// v' = v + dt·(u + κ L p')
/// ```
///
/// where `L` is the path-graph coupling operator. This is exactly
/// `x' = A x + B u`. Reward is `−(‖p‖² + 0.1‖v‖² + 0.01‖u‖²)` on the
/// pre-step state and action.
#[derive(Debug, Clone)]
pub struct ChainLqrEnv {
    spec: EnvSpec,
    carts: usize,
    kappa: f64,
    state: Vec<f64>,
    steps: usize,
    clipped: u64,
}

impl ChainLqrEnv {
    pub const KAPPA: f64 = 0.5;
    pub const POSITION_COST: f64 = 1.0;
    pub const VELOCITY_COST: f64 = 0.1;
    pub const CONTROL_COST: f64 = 0.01;

    pub fn new(carts: usize) -> Self {
        Self::with_coupling(carts, Self::KAPPA)
    }

    pub fn with_coupling(carts: usize, kappa: f64) -> Self {
        assert!(carts >= 1);
        Self {
            spec: EnvSpec {
                id: format!("chain-lqr-{carts}"),
                state_dim: 2 * carts,
                action_dim: carts,
                action_bound: vec![1.0; carts],
                max_episode_steps: 200,
                dt: 0.05,
            },
            carts,
            kappa,
            state: vec![0.0; 2 * carts],
            steps: 0,
            clipped: 0,
        }
    }

    pub fn carts(&self) -> usize {
        self.carts
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn set_state(&mut self, state: &[f64]) {
        assert_eq!(state.len(), 2 * self.carts);
        self.state = state.to_vec();
        self.steps = 0;
    }

    /// Next state and reward without touching the environment.
    pub fn transition(&self, state: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
        let m = self.carts;
        let dt = self.spec.dt;
        let (p, v) = state.split_at(m);
        let reward = -(Self::POSITION_COST * dot(p, p)
            + Self::VELOCITY_COST * dot(v, v)
            + Self::CONTROL_COST * dot(u, u));
        let p_next: Vec<f64> = p.iter().zip(v).map(|(pi, vi)| pi + dt * vi).collect();
        let mut next = p_next.clone();
        for i in 0..m {
            let mut force = u[i];
            if i > 0 {
                force += self.kappa * (p_next[i - 1] - p_next[i]);
            }
            if i + 1 < m {
                force += self.kappa * (p_next[i + 1] - p_next[i]);
            }
            next.push(v[i] + dt * force);
        }
        (next, reward)
    }

    /// `(A, B)` with `x' = A x + B u`.
    pub fn linear_model(&self) -> (Matrix, Matrix) {
        let m = self.carts;
        let dt = self.spec.dt;
        // K = κ L, the coupling acceleration per unit position.
        let mut k = Matrix::zeros(m, m);
        for i in 0..m {
            if i > 0 {
                k[(i, i - 1)] += self.kappa;
                k[(i, i)] -= self.kappa;
            }
            if i + 1 < m {
                k[(i, i + 1)] += self.kappa;
                k[(i, i)] -= self.kappa;
            }
        }
        let mut a = Matrix::zeros(2 * m, 2 * m);
        let mut b = Matrix::zeros(2 * m, m);
        for i in 0..m {
            a[(i, i)] = 1.0;
            a[(i, m + i)] = dt;
            a[(m + i, m + i)] = 1.0;
            b[(m + i, i)] = dt;
            for j in 0..m {
                a[(m + i, j)] += dt * k[(i, j)];
                a[(m + i, m + j)] += dt * dt * k[(i, j)];
            }
        }
        (a, b)
    }

    /// Diagonal stage-cost weights `(Q, R)` with reward `−(xᵀQx + uᵀRu)`.
    pub fn cost_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.carts;
        let mut q = vec![Self::POSITION_COST; m];
        q.extend(std::iter::repeat_n(Self::VELOCITY_COST, m));
        (q, vec![Self::CONTROL_COST; m])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Env for ChainLqrEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = (0..2 * self.carts).map(|_| rng.random_range(-1.0..=1.0)).collect();
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if self.steps >= self.spec.max_episode_steps {
            return Err(EnvError::EpisodeOver);
        }
        let (u, clipped) = clip_action(action, &self.spec.action_bound, &self.spec.id)?;
        self.clipped += clipped as u64;
        let (next, reward) = self.transition(&self.state, &u);
        self.state = next;
        self.steps += 1;
        Ok(Step {
            state: self.observe(),
            reward,
            done: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }

    fn observe(&self) -> Vec<f64> {
        self.state.clone()
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_stays_at_rest() {
        let mut env = ChainLqrEnv::new(3);
        env.set_state(&[0.0; 6]);
        let s = env.step(&[0.0; 3]).unwrap();
        assert_eq!(s.state, vec![0.0; 6]);
        assert_eq!(s.reward, 0.0);
    }

    #[test]
    fn single_step_matches_independent_matrix_form() {
        // A and B written out entry by entry for three carts.
        let (dt, k) = (0.05, 0.5);
        let lap = [[-k, k, 0.0], [k, -2.0 * k, k], [0.0, k, -k]];
        let mut a = [[0.0; 6]; 6];
        for i in 0..3 {
            a[i][i] = 1.0;
            a[i][3 + i] = dt;
            a[3 + i][3 + i] = 1.0;
            for j in 0..3 {
                a[3 + i][j] = dt * lap[i][j];
                a[3 + i][3 + j] += dt * dt * lap[i][j];
            }
        }
        let mut env = ChainLqrEnv::new(3);
        for seed in 0..20 {
            let x = env.reset(seed);
            let u = [0.3, -0.9, 0.55];
            let s = env.step(&u).unwrap();
            for i in 0..6 {
                let mut expected: f64 = (0..6).map(|j| a[i][j] * x[j]).sum();
                if i >= 3 {
                    expected += dt * u[i - 3];
                }
                assert!((s.state[i] - expected).abs() < 1e-12);
            }
            let (lm_a, lm_b) = env.linear_model();
            for i in 0..6 {
                for j in 0..6 {
                    assert!((lm_a[(i, j)] - a[i][j]).abs() < 1e-15);
                }
                for j in 0..3 {
                    let b = if i >= 3 && i - 3 == j { dt } else { 0.0 };
                    assert_eq!(lm_b[(i, j)], b);
                }
            }
        }
    }

    #[test]
    fn linear_in_state_and_action() {
        let env = ChainLqrEnv::new(4);
        let x = [0.2, -0.4, 0.1, 0.3, -0.2, 0.05, 0.4, -0.1];
        let u = [0.1, -0.2, 0.3, -0.05];
        let (y, r) = env.transition(&x, &u);
        for alpha in [0.5, -1.7, 2.0] {
            let ax: Vec<f64> = x.iter().map(|v| alpha * v).collect();
            let au: Vec<f64> = u.iter().map(|v| alpha * v).collect();
            let (ay, ar) = env.transition(&ax, &au);
            for (p, q) in ay.iter().zip(&y) {
                assert!((p - alpha * q).abs() < 1e-12);
            }
            assert!((ar - alpha * alpha * r).abs() < 1e-12);
        }
    }

    #[test]
    fn reset_within_box() {
        let mut env = ChainLqrEnv::new(6);
        for seed in 0..100 {
            let s = env.reset(seed);
            assert!(s.iter().all(|v| v.abs() <= 1.0));
        }
        assert_eq!(env.reset(9), env.reset(9));
    }
}
