use serde::{Deserialize, Serialize};

use super::{Dense, Mlp, NdError};

/// Adam optimizer state for one [`Mlp`]: first and second moments shaped
/// like the parameters, plus the bias-correction step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<Dense>,
    second: Vec<Dense>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &Mlp) -> Self {
        Self::with_constants(params, Self::BETA1, Self::BETA2, Self::EPS)
    }

    pub fn with_constants(params: &Mlp, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Dense> = params
            .layers()
            .iter()
            .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn matches(&self, params: &Mlp) -> bool {
        self.first.len() == params.layers().len()
            && self
                .first
                .iter()
                .zip(params.layers())
                .all(|(m, p)| m.weight.rows() == p.weight.rows() && m.weight.cols() == p.weight.cols())
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
///
/// Every gradient entry is checked before anything is written, so a rejected
/// update leaves both the parameters and the state untouched.
pub fn adam_step(params: &mut Mlp, grads: &[Dense], state: &mut AdamState, lr: f64) -> Result<(), NdError> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(NdError::Invalid(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if !state.matches(params) || grads.len() != params.layers().len() {
        return Err(NdError::Shape {
            context: "adam state/gradient layer count".into(),
            expected: params.layers().len(),
            found: grads.len(),
        });
    }
    for (k, (g, p)) in grads.iter().zip(params.layers()).enumerate() {
        if g.weight.rows() != p.weight.rows() || g.weight.cols() != p.weight.cols() || g.bias.len() != p.bias.len() {
            return Err(NdError::Shape {
                context: format!("layer {k} gradient"),
                expected: p.num_params(),
                found: g.num_params(),
            });
        }
        if !(g.weight.as_slice().iter().chain(&g.bias)).all(|v| v.is_finite()) {
            return Err(NdError::NonFinite { layer: k });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for (((p, g), m), v) in params
        .layers_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        update(
            p.weight.as_mut_slice(),
            g.weight.as_slice(),
            m.weight.as_mut_slice(),
            v.weight.as_mut_slice(),
        );
        update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_grads(mlp: &Mlp, value: f64) -> Vec<Dense> {
        let mut g: Vec<Dense> = mlp.layers().to_vec();
        for l in &mut g {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w = value);
            l.bias.iter_mut().for_each(|b| *b = value);
        }
        g
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::init(&[3, 4, 2], &mut rng);
        let before = mlp.clone();
        let mut state = AdamState::new(&mlp);
        let zeros = constant_grads(&mlp, 0.0);
        for k in 1..=5 {
            adam_step(&mut mlp, &zeros, &mut state, 3e-4).unwrap();
            assert_eq!(state.step(), k);
        }
        assert_eq!(mlp, before);
    }

    #[test]
    fn constant_gradient_follows_closed_form() {
        // With a constant gradient g the bias-corrected moments are exactly g
        // and g², so every step moves each parameter by -lr·g/(|g| + eps).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::init(&[2, 3, 1], &mut rng);
        let start = mlp.to_flat();
        let mut state = AdamState::new(&mlp);
        let (g, lr, steps) = (0.37, 3e-4, 200);
        let grads = constant_grads(&mlp, g);
        for _ in 0..steps {
            adam_step(&mut mlp, &grads, &mut state, lr).unwrap();
        }
        let per_step = lr * g / (g + AdamState::EPS);
        for (p, p0) in mlp.to_flat().iter().zip(&start) {
            let expected = p0 - steps as f64 * per_step;
            assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_with_layer() {
        let mut mlp = Mlp::zeros(&[2, 3, 1]);
        let before = mlp.clone();
        let mut state = AdamState::new(&mlp);
        let mut grads = constant_grads(&mlp, 0.1);
        grads[1].bias[0] = f64::NAN;
        let err = adam_step(&mut mlp, &grads, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, NdError::NonFinite { layer: 1 }));
        assert_eq!(mlp, before);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn defaults_are_canonical() {
        let state = AdamState::new(&Mlp::zeros(&[1, 1]));
        assert_eq!((state.beta1, state.beta2, state.eps), (0.9, 0.999, 1e-8));
    }
}
