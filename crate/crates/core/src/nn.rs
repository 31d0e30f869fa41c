//! Small dense networks with exact reverse-mode gradients and Adam.
//!
//! Matrices are row-major `f64`. A batch of `n` inputs of width `d` is a flat
//! slice of length `n * d`. Products go through `matrixmultiply::dgemm`.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};

use crate::error::{shape, Error, Result};
use crate::rng;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(z),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer, `weights` is `out_dim x in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn validate(&self) -> Result<()> {
        shape("layer weights", self.in_dim * self.out_dim, self.weights.len())?;
        shape("layer biases", self.out_dim, self.biases.len())?;
        if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite layer parameter".into()));
        }
        Ok(())
    }
}

/// Multi-layer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    seed: u64,
}

/// Intermediate values of one batched forward pass.
///
/// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients, laid out exactly like [`Mlp`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &Mlp) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }
}

/// `c (m x n) = a (m x k) * b (k x n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: the index bounds of every operand were checked above and `c`
    // is an exclusively borrowed row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Random init: weights uniform in `±sqrt(3 / fan_in)` (variance `1 / fan_in`),
    /// biases zero.
    pub fn new(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(alloc::format!(
                "need at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(alloc::format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let mut rng = rng::rng(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = libm::sqrt(3.0 / fan_in as f64);
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Dense {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights: (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect(),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Mlp {
            layers,
            activation,
            seed,
        })
    }

    /// Assemble from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        for pair in layers.windows(2) {
            shape("layer chain", pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Mlp {
            layers,
            activation,
            seed,
        })
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

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<()> {
        shape("network input", batch * self.input_dim(), input.len())
    }

    fn affine(layer: &Dense, input: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(batch * layer.out_dim, 0.0);
        // out = input (batch x in) * W^T (in x out)
        gemm(
            batch,
            layer.in_dim,
            layer.out_dim,
            input,
            layer.in_dim,
            1,
            &layer.weights,
            1,
            layer.in_dim,
            out,
        );
        for row in out.chunks_exact_mut(layer.out_dim) {
            for (o, b) in row.iter_mut().zip(&layer.biases) {
                *o += b;
            }
        }
    }

    /// Batched forward pass keeping everything needed for [`Mlp::backward`].
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<ForwardCache> {
        self.check_input(input, batch)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            Self::affine(layer, &activations[i], batch, &mut z);
            let a = if i == last || self.activation == Activation::Identity {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            batch,
            activations,
            pre_activations,
        })
    }

    /// Forward pass without a cache; `scratch` is reused between calls.
    pub fn predict_into(
        &self,
        input: &[f64],
        batch: usize,
        out: &mut Vec<f64>,
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        self.check_input(input, batch)?;
        let last = self.layers.len() - 1;
        out.clear();
        out.extend_from_slice(input);
        for (i, layer) in self.layers.iter().enumerate() {
            Self::affine(layer, out, batch, scratch);
            if i != last && self.activation != Activation::Identity {
                for v in scratch.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            core::mem::swap(out, scratch);
        }
        Ok(())
    }

    pub fn predict(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut scratch = Vec::new();
        self.predict_into(input, batch, &mut out, &mut scratch)?;
        Ok(out)
    }

    /// Reverse-mode pass. `output_grad` is dL/d(output), batch-major.
    ///
    /// Returns the parameter gradients summed over the batch and dL/d(input).
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let batch = cache.batch;
        shape("cache depth", self.layers.len(), cache.pre_activations.len())?;
        shape("cache depth", self.layers.len() + 1, cache.activations.len())?;
        for (i, layer) in self.layers.iter().enumerate() {
            shape("cached activation", batch * layer.in_dim, cache.activations[i].len())?;
            shape("cached pre-activation", batch * layer.out_dim, cache.pre_activations[i].len())?;
        }
        shape("output gradient", batch * self.output_dim(), output_grad.len())?;

        let last = self.layers.len() - 1;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last && self.activation != Activation::Identity {
                let z = &cache.pre_activations[i];
                let a = &cache.activations[i + 1];
                for ((d, &zv), &av) in delta.iter_mut().zip(z).zip(a) {
                    *d *= self.activation.derivative(zv, av);
                }
            }
            let input = &cache.activations[i];
            let g = &mut grads.layers[i];
            // dW (out x in) = delta^T (out x batch) * input (batch x in)
            gemm(
                layer.out_dim,
                batch,
                layer.in_dim,
                &delta,
                1,
                layer.out_dim,
                input,
                layer.in_dim,
                1,
                &mut g.weights,
            );
            for row in delta.chunks_exact(layer.out_dim) {
                for (gb, d) in g.biases.iter_mut().zip(row) {
                    *gb += d;
                }
            }
            // d(input) (batch x in) = delta (batch x out) * W (out x in)
            let mut next = vec![0.0; batch * layer.in_dim];
            gemm(
                batch,
                layer.out_dim,
                layer.in_dim,
                &delta,
                layer.out_dim,
                1,
                &layer.weights,
                layer.in_dim,
                1,
                &mut next,
            );
            delta = next;
        }
        Ok((grads, delta))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first_moment: Gradients,
    second_moment: Gradients,
}

impl Adam {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Non-finite gradients are rejected
    /// before anything is modified.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<()> {
        shape("gradient layers", params.layers.len(), grads.layers.len())?;
        for (p, g) in params.layers.iter().zip(&grads.layers) {
            shape("gradient weights", p.weights.len(), g.weights.len())?;
            shape("gradient biases", p.biases.len(), g.biases.len())?;
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for (((p, g), m), v) in params
            .params_mut()
            .zip(grads.iter())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, b: f64, act: Activation) -> Mlp {
        let hidden = Dense {
            in_dim: 1,
            out_dim: 1,
            weights: vec![w],
            biases: vec![b],
        };
        let out = Dense {
            in_dim: 1,
            out_dim: 1,
            weights: vec![1.0],
            biases: vec![0.0],
        };
        Mlp::from_layers(vec![hidden, out], act, 0).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::new(&[2, 1], Activation::Tanh, 7).unwrap();
        let b = Mlp::new(&[2, 1], Activation::Tanh, 7).unwrap();
        assert_eq!(a, b);
        let c = Mlp::new(&[2, 1], Activation::Tanh, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let net = Mlp::new(&[3, 64, 64, 6], Activation::Tanh, 1).unwrap();
        assert_eq!(net.layers().len(), 3);
        assert_eq!(net.output_dim(), 6);
        assert_eq!(net.layer_sizes(), vec![3, 64, 64, 6]);
        assert!(net.layers().iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(Mlp::new(&[3], Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(Mlp::new(&[], Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(Mlp::new(&[3, 0, 2], Activation::Tanh, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_variance_matches_fan_in() {
        // 64 x 157 = 10048 draws
        let net = Mlp::new(&[64, 157], Activation::Tanh, 3).unwrap();
        let w = &net.layers()[0].weights;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((var - 1.0 / 64.0).abs() < 0.2 / 64.0, "variance {var}");
    }

    #[test]
    fn from_layers_rejects_broken_chain() {
        let err = Mlp::from_layers(vec![Dense::zeros(2, 3), Dense::zeros(4, 1)], Activation::Tanh, 0);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_network_passes_input_through() {
        let mut l = Dense::zeros(3, 3);
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_layers(vec![l.clone(), l], Activation::Identity, 0).unwrap();
        let x = [0.3, -1.5, 2.0, 4.0, 5.0, -6.0];
        assert_eq!(net.forward(&x, 2).unwrap().output(), &x);
    }

    #[test]
    fn tanh_unit() {
        let net = single(1.0, 0.0, Activation::Tanh);
        let y = net.forward(&[0.5], 1).unwrap().output()[0];
        assert!((y - 0.46211716).abs() < 1e-8);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut net = Mlp::new(&[4, 5, 2], Activation::Tanh, 11).unwrap();
        for p in net.params_mut() {
            *p = 0.0;
        }
        net.layers_mut()[1].biases = vec![0.25, -3.0];
        let out = net.predict(&[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(out, vec![0.25, -3.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::new(&[4, 2], Activation::Tanh, 0).unwrap();
        assert!(matches!(net.forward(&[1.0; 3], 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_chain_rule() {
        let w = 1.7;
        let l = Dense {
            in_dim: 1,
            out_dim: 1,
            weights: vec![w],
            biases: vec![0.4],
        };
        let net = Mlp::from_layers(vec![l], Activation::Identity, 0).unwrap();
        let cache = net.forward(&[3.0], 1).unwrap();
        let (g, dx) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights[0], 3.0);
        assert_eq!(g.layers[0].biases[0], 1.0);
        assert_eq!(dx[0], w);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let net = Mlp::new(&[5, 8, 4], Activation::Tanh, 2).unwrap();
        let cache = net.forward(&[0.1, 0.2, 0.3, 0.4, 0.5], 1).unwrap();
        let (g, dx) = net.backward(&cache, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let a = Mlp::new(&[5, 8, 4], Activation::Tanh, 2).unwrap();
        let b = Mlp::new(&[5, 7, 4], Activation::Tanh, 2).unwrap();
        let cache = a.forward(&[0.0; 5], 1).unwrap();
        assert!(matches!(b.backward(&cache, &[1.0; 4]), Err(Error::Shape { .. })));
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let before = net.clone();
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_size() {
        let mut net = single(0.0, 0.0, Activation::Identity);
        let mut grads = Gradients::zeros_like(&net);
        for g in grads.iter_mut() {
            *g = 1.0;
        }
        let before = net.clone();
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step(&mut net, &grads).unwrap();
        for (p, q) in net.params().zip(before.params()) {
            assert!((p - q + 9.99999e-4).abs() < 1e-9, "{p} {q}");
        }
    }

    #[test]
    fn adam_is_pure_given_state() {
        let net = Mlp::new(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        for (i, g) in grads.iter_mut().enumerate() {
            *g = (i as f64 * 0.37).sin();
        }
        let adam = Adam::new(&net, AdamConfig::default());
        let run = || {
            let (mut p, mut s) = (net.clone(), adam.clone());
            s.step(&mut p, &grads).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_surfaces_nan() {
        let mut net = Mlp::new(&[2, 2], Activation::Tanh, 5).unwrap();
        let before = net.clone();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].biases[1] = f64::NAN;
        let mut adam = Adam::new(&net, AdamConfig::default());
        assert!(matches!(adam.step(&mut net, &grads), Err(Error::Training(_))));
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 0);
    }
}
