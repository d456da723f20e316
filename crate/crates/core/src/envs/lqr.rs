use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{episode_seeds, rollout_returns, ChainLqrEnv, EnvError};
use crate::ndmath::Matrix;

/// Solution of the discrete-time algebraic Riccati equation
/// `P = Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Matrix,
    /// Optimal feedback gain `K = (R + BᵀPB)⁻¹ BᵀPA`; the control is `u = −Kx`.
    pub gain: Matrix,
    pub iterations: usize,
    /// `‖P − (Q + AᵀPA − …)‖_∞` at the returned `P`.
    pub residual: f64,
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out[(r, c)] = m[(r, c)];
        }
    }
    out
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), EnvError> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| EnvError::Linalg("R + BᵀPB is singular".into()))?;
    let gain = s_inv * (&bt_p * a);
    let at_p = a.transpose() * p;
    let next = q + &at_p * a - (&at_p * b) * &gain;
    // Symmetrize against round-off drift.
    let next = (&next + next.transpose()) * 0.5;
    Ok((next, gain))
}

/// Fixed-point iteration from `P₀ = Q` until successive iterates differ by
/// less than `tol` in max-norm.
pub fn solve_dare(a: &Matrix, b: &Matrix, q_diag: &[f64], r_diag: &[f64], tol: f64, max_iter: usize) -> Result<RiccatiSolution, EnvError> {
    let (a, b) = (to_na(a), to_na(b));
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q_diag));
    let r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(r_diag));
    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        let (next, _) = riccati_map(&a, &b, &q, &r, &p)?;
        change = (&next - &p).amax();
        p = next;
        if change < tol {
            let (mapped, gain) = riccati_map(&a, &b, &q, &r, &p)?;
            let residual = (&mapped - &p).amax();
            return Ok(RiccatiSolution {
                p: from_na(&p),
                gain: from_na(&gain),
                iterations: it,
                residual,
            });
        }
    }
    Err(EnvError::RiccatiDiverged {
        iterations: max_iter,
        residual: change,
    })
}

/// Saturated linear state feedback `u = clip(−Kx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrController {
    pub gain: Matrix,
    pub bound: Vec<f64>,
}

impl LqrController {
    pub const TOL: f64 = 1e-10;
    pub const MAX_ITER: usize = 100_000;

    pub fn for_chain(env: &ChainLqrEnv) -> Result<Self, EnvError> {
        let (a, b) = env.linear_model();
        let (q, r) = env.cost_weights();
        let sol = solve_dare(&a, &b, &q, &r, Self::TOL, Self::MAX_ITER)?;
        Ok(Self {
            gain: sol.gain,
            bound: vec![1.0; env.carts()],
        })
    }

    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        (0..self.gain.rows())
            .map(|i| {
                let u: f64 = -self.gain.row(i).iter().zip(state).map(|(k, x)| k * x).sum::<f64>();
                u.clamp(-self.bound[i], self.bound[i])
            })
            .collect()
    }
}

/// Mean undiscounted episodic return of the (clipped) LQR controller over
/// `episodes` resets drawn from `seed`.
pub fn lqr_optimal_return(env: &ChainLqrEnv, episodes: usize, seed: u64) -> Result<f64, EnvError> {
    let controller = LqrController::for_chain(env)?;
    let mut sim = env.clone();
    let returns = rollout_returns(&mut sim, &episode_seeds(seed, episodes), |s| controller.act(s))?;
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}
