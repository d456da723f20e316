use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, NdError};

/// Hidden-layer nonlinearity. Output layers are always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Rectified linear unit; the subgradient at exactly zero is taken as 0.
    #[default]
    Relu,
}

/// One affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Multilayer perceptron parameters.
///
/// Consecutive layers always chain (`out` of layer k equals `in` of layer
/// k + 1); construction through [`Mlp::new`] or deserialization enforces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    activation: Activation,
    layers: Vec<Dense>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = NdError;

    fn try_from(repr: MlpRepr) -> Result<Self, NdError> {
        let mut mlp = Mlp::new(repr.layers)?;
        mlp.activation = repr.activation;
        Ok(mlp)
    }
}

impl From<Mlp> for MlpRepr {
    fn from(mlp: Mlp) -> Self {
        MlpRepr {
            activation: mlp.activation,
            layers: mlp.layers,
        }
    }
}

/// Per-layer values recorded by a forward pass, sufficient for exact backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input fed to each layer (the batch itself for layer 0).
    inputs: Vec<Matrix>,
    /// Pre-activations of every hidden layer.
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Smallest |pre-activation| over all hidden units; distance to the
    /// nearest ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.pre_activations
            .iter()
            .flat_map(|m| m.as_slice().iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

/// Gradient of a scalar loss with respect to every parameter of an [`Mlp`]
/// (shape-matched layer by layer) and with respect to its input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub layers: Vec<Dense>,
    pub input: Matrix,
}

impl Grad {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite) && self.input.is_finite()
    }

    /// Euclidean norm over all parameter gradients (the input part excluded).
    pub fn param_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Parameter gradients flattened in the same order as [`Mlp::to_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::num_params).sum());
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self, NdError> {
        if layers.is_empty() {
            return Err(NdError::Invalid("an MLP needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(NdError::Shape {
                    context: format!("layer {k} bias"),
                    expected: l.output_dim(),
                    found: l.bias.len(),
                });
            }
            if k > 0 && layers[k - 1].output_dim() != l.input_dim() {
                return Err(NdError::Shape {
                    context: format!("layer {k} input"),
                    expected: layers[k - 1].output_dim(),
                    found: l.input_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    /// All-zero network with the given layer widths (`sizes[0]` is the input width).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need input and output widths");
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self::new(layers).expect("widths chain by construction")
    }

    /// Weights uniform in `±1/√fan_in`, biases zero. Draws row-major, layer by layer.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut mlp = Self::zeros(sizes);
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.input_dim().max(1) as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-bound..bound);
            }
        }
        mlp
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes() == other.sizes()
    }

    /// All parameters flattened: per layer, row-major weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NdError> {
        if flat.len() != self.num_params() {
            return Err(NdError::Shape {
                context: "flat parameter vector".into(),
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Forward pass on a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NdError> {
        let (out, cache) = self.forward_batch(&Matrix::row_vector(input))?;
        Ok((out.into_vec(), cache))
    }

    /// Forward pass on a batch (one sample per row).
    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, ForwardCache), NdError> {
        self.check_input(input)?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers - 1);
        let mut current = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &current);
            inputs.push(current);
            if k + 1 == n_layers {
                return Ok((
                    z,
                    ForwardCache {
                        inputs,
                        pre_activations,
                    },
                ));
            }
            current = relu(&z);
            pre_activations.push(z);
        }
        unreachable!("loop returns on the last layer")
    }

    /// Forward pass without recording a cache.
    pub fn predict_batch(&self, input: &Matrix) -> Result<Matrix, NdError> {
        self.check_input(input)?;
        let mut current = affine(&self.layers[0], input);
        for layer in &self.layers[1..] {
            relu_in_place(&mut current);
            current = affine(layer, &current);
        }
        Ok(current)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NdError> {
        Ok(self.predict_batch(&Matrix::row_vector(input))?.into_vec())
    }

    /// Backward pass for a single sample.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Grad, NdError> {
        self.backward_batch(cache, &Matrix::row_vector(output_grad))
    }

    /// Backward pass for a batch. Parameter gradients are summed over the rows
    /// of `output_grad`; the input gradient keeps one row per sample.
    pub fn backward_batch(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Grad, NdError> {
        self.check_cache(cache, output_grad)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.clone();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                relu_backward(&mut g, &cache.pre_activations[k]);
            }
            let weight = g.matmul_tn(&cache.inputs[k]);
            let bias = g.column_sums();
            layers.push(Dense { weight, bias });
            g = g.matmul(&self.layers[k].weight);
        }
        layers.reverse();
        Ok(Grad { layers, input: g })
    }

    /// Gradient with respect to the input batch only; parameter gradients are
    /// not formed.
    pub fn input_grad_batch(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Matrix, NdError> {
        self.check_cache(cache, output_grad)?;
        let mut g = output_grad.clone();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                relu_backward(&mut g, &cache.pre_activations[k]);
            }
            g = g.matmul(&self.layers[k].weight);
        }
        Ok(g)
    }

    fn check_input(&self, input: &Matrix) -> Result<(), NdError> {
        if input.cols() != self.input_dim() {
            return Err(NdError::Shape {
                context: "layer 0 input".into(),
                expected: self.input_dim(),
                found: input.cols(),
            });
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(), NdError> {
        if cache.inputs.len() != self.layers.len()
            || cache.pre_activations.len() + 1 != self.layers.len()
        {
            return Err(NdError::Shape {
                context: "forward cache layer count".into(),
                expected: self.layers.len(),
                found: cache.inputs.len(),
            });
        }
        for (k, (input, layer)) in cache.inputs.iter().zip(&self.layers).enumerate() {
            if input.cols() != layer.input_dim() {
                return Err(NdError::Shape {
                    context: format!("layer {k} cached input"),
                    expected: layer.input_dim(),
                    found: input.cols(),
                });
            }
        }
        if output_grad.cols() != self.output_dim() {
            return Err(NdError::Shape {
                context: format!("layer {} output gradient", self.layers.len() - 1),
                expected: self.output_dim(),
                found: output_grad.cols(),
            });
        }
        if output_grad.rows() != cache.batch_size() {
            return Err(NdError::Shape {
                context: "output gradient batch".into(),
                expected: cache.batch_size(),
                found: output_grad.rows(),
            });
        }
        Ok(())
    }
}

fn affine(layer: &Dense, input: &Matrix) -> Matrix {
    let mut z = input.matmul_nt(&layer.weight);
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    z
}

fn relu(z: &Matrix) -> Matrix {
    let mut a = z.clone();
    relu_in_place(&mut a);
    a
}

fn relu_in_place(z: &mut Matrix) {
    for v in z.as_mut_slice() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(g: &mut Matrix, pre: &Matrix) {
    for (gv, z) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if *z <= 0.0 {
            *gv = 0.0;
        }
    }
}
