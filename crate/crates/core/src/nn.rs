//! Dense-network substrate: affine layers, ReLU, softmax cross-entropy,
//! reverse-mode gradients and SGD with momentum.
//!
//! Parameters and activations are stored as `f64`. [`Precision::F32`] emulates
//! 32-bit training by rounding every parameter to the nearest `f32` after each
//! update; [`Precision::F64`] keeps full precision and is what gradient checks
//! and bit-exact determinism tests run under.
//!
//! Weights are row-major with shape `(out_dim, in_dim)`.

use rand::Rng;
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Numeric precision of stored parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::None => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// `y = activation(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    /// Fan-based uniform init in `[-a, a]`, `a = sqrt(6 / (in + out))`; zero bias.
    /// Weights are rounded to `f32` so a fresh layer is exactly representable
    /// in checkpoints and under [`Precision::F32`].
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng) as f32 as f64).collect();
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::from_parts(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::invalid(format!(
                "layer {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Pre-activation `W x + b`.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Per-layer parameter gradients, shape-congruent with an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

impl GradientSet {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for x in s {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward_from_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer output {} does not feed next input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Builds `dims[0] -> dims[1] -> ...` with `activations[i]` after layer `i`.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() + 1 != dims.len() {
            return Err(Error::invalid("dims and activations disagree"));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::new(w[0], w[1], act, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::invalid(format!(
                "input length {} does not match MLP input {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.affine(&current);
            for v in &mut z {
                *v = layer.activation.apply(*v);
            }
            current = z;
        }
        current
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        Ok(self.forward_trace_unchecked(x))
    }

    pub(crate) fn forward_trace_unchecked(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let z = layer.affine(&current);
            let y = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(current);
            pre_activations.push(z);
            current = y;
        }
        Trace {
            inputs,
            pre_activations,
            output: current,
        }
    }

    /// Accumulates parameter gradients of `<upstream, output>` into `grads` and
    /// returns the gradient with respect to the traced input.
    pub fn backward_from_trace(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut GradientSet,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.out_dim() {
            return Err(Error::invalid(format!(
                "upstream length {} does not match MLP output {}",
                upstream.len(),
                self.out_dim()
            )));
        }
        Ok(self.backward_unchecked(trace, upstream, grads))
    }

    pub(crate) fn backward_unchecked(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut GradientSet,
    ) -> Vec<f64> {
        let mut delta = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_activations[idx];
            let x = &trace.inputs[idx];
            for (d, &zv) in delta.iter_mut().zip(z) {
                *d *= layer.activation.derivative(zv);
            }
            let g = &mut grads.layers[idx];
            for (o, &dz) in delta.iter().enumerate() {
                g.bias[o] += dz;
                if dz != 0.0 {
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, xv) in row.iter_mut().zip(x) {
                        *w += dz * xv;
                    }
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (o, &dz) in delta.iter().enumerate() {
                if dz != 0.0 {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (acc, w) in dx.iter_mut().zip(row) {
                        *acc += w * dz;
                    }
                }
            }
            delta = dx;
        }
        delta
    }

    /// Gradients of `<upstream, forward(x)>` with respect to parameters and `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(GradientSet, Vec<f64>)> {
        let trace = self.forward_trace(x)?;
        let mut grads = GradientSet::zeros_like(self);
        let dx = self.backward_from_trace(&trace, upstream, &mut grads)?;
        Ok((grads, dx))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Returns `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_norm = max + sum.ln();
    let loss = log_norm - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

/// SGD with heavy-ball momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    precision: Precision,
    velocity: Vec<Vec<f64>>,
    steps: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig, precision: Precision) -> Self {
        Self {
            config,
            precision,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update. `params` and `grads` are matching flat parameter blocks.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::invalid("parameter and gradient shapes differ"));
        }
        if let Some(bad) = grads.iter().flat_map(|g| g.iter()).find(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.steps,
                reason: format!("non-finite gradient entry {bad}"),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let SgdConfig {
            learning_rate,
            momentum,
        } = self.config;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi;
                *pi = self.precision.round(*pi - learning_rate * *vi);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: Vec<f64>, b: Vec<f64>, out: usize, inp: usize, act: Activation) -> DenseLayer {
        DenseLayer::from_parts(inp, out, w, b, act).unwrap()
    }

    #[test]
    fn single_relu_layer_by_hand() {
        let m = Mlp::new(vec![layer(
            vec![2.0, 0.0, 0.0, 3.0],
            vec![1.0, -1.0],
            2,
            2,
            Activation::Relu,
        )])
        .unwrap();
        assert_eq!(m.forward(&[1.0, 0.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn zero_weights_give_activated_bias() {
        let m = Mlp::new(vec![layer(
            vec![0.0; 6],
            vec![0.5, -2.0],
            2,
            3,
            Activation::Relu,
        )])
        .unwrap();
        assert_eq!(m.forward(&[7.0, -3.0, 1.0]).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::random(&[3, 4, 2], &[Activation::Relu, Activation::None], &mut rng).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            m.backward(&[1.0, 2.0, 3.0], &[1.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(DenseLayer::from_parts(2, 2, vec![0.0; 3], vec![0.0; 2], Activation::None).is_err());
        assert!(Mlp::new(vec![
            DenseLayer::zeros(2, 3, Activation::Relu).unwrap(),
            DenseLayer::zeros(4, 1, Activation::None).unwrap(),
        ])
        .is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::random(&[3, 5, 2], &[Activation::Relu, Activation::None], &mut rng).unwrap();
        let (g, dx) = m.backward(&[0.3, -0.2, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::random(&[3, 2], &[Activation::None], &mut rng).unwrap();
        let x = [0.5, -1.5, 2.0];
        let up = [0.25, -4.0];
        let (g, _) = m.backward(&x, &up).unwrap();
        let expected: Vec<f64> = up.iter().flat_map(|u| x.iter().map(move |v| u * v)).collect();
        assert_eq!(g.layers[0].weights, expected);
        assert_eq!(g.layers[0].bias, up.to_vec());
    }

    #[test]
    fn init_respects_fan_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = DenseLayer::new(10, 20, Activation::Relu, &mut rng).unwrap();
        let a = (6.0f64 / 30.0).sqrt();
        assert!(l.weights().iter().all(|w| w.abs() <= a * (1.0 + 1e-6)));
        assert!(l.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for c in [2usize, 5, 174] {
            let (loss, grad) = softmax_cross_entropy(&vec![0.7; c], 0).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
            assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn lr_zero_is_identity_and_lr_one_subtracts_gradient() {
        let mut p = vec![1.0, -2.0, 3.5];
        let g = vec![0.5, 0.25, -1.0];
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.0,
                momentum: 0.9,
            },
            Precision::F64,
        );
        opt.step(vec![p.as_mut_slice()], &[g.as_slice()]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);

        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 1.0,
                momentum: 0.0,
            },
            Precision::F64,
        );
        opt.step(vec![p.as_mut_slice()], &[g.as_slice()]).unwrap();
        assert_eq!(p, vec![0.5, -2.25, 4.5]);
    }

    #[test]
    fn momentum_two_steps_match_unrolled_recurrence() {
        // v1 = g, p1 = p0 - lr g; v2 = 0.9 g + g = 1.9 g, p2 = p1 - 1.9 lr g.
        let (p0, g, lr) = (2.0f64, 0.5f64, 0.1f64);
        let mut p = vec![p0];
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: lr,
                momentum: 0.9,
            },
            Precision::F64,
        );
        opt.step(vec![p.as_mut_slice()], &[&[g]]).unwrap();
        assert_eq!(p[0], p0 - lr * g);
        opt.step(vec![p.as_mut_slice()], &[&[g]]).unwrap();
        let expected = (p0 - lr * g) - lr * (0.9 * g + g);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - (p0 - 2.9 * lr * g)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![0.0];
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.1,
                momentum: 0.0,
            },
            Precision::F64,
        );
        let err = opt.step(vec![p.as_mut_slice()], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn f32_precision_rounds_parameters() {
        let mut p = vec![0.1f64];
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 1e-3,
                momentum: 0.0,
            },
            Precision::F32,
        );
        opt.step(vec![p.as_mut_slice()], &[&[1.0 / 3.0]]).unwrap();
        assert_eq!(p[0], p[0] as f32 as f64);
    }
}
