//! A small dense MLP with explicit forward and reverse passes.
//!
//! Layers are `W_i: n_i × n_{i−1}` plus bias `b_i`. Every layer except the last
//! applies the activation; the last layer produces logits. The network splits
//! into an encoder (layers `1..=m`, output = latent) and a head (layers after
//! `m`). In relative modes the head consumes the `k`-dimensional relative
//! representation instead of the latent itself.

mod io;
pub mod train;
pub mod transform;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BatchStats;
use crate::linalg::Matrix;
use crate::symmetry::Activation;

pub use io::{load_weights, save_weights, FORMAT_VERSION, MAGIC};

/// What the head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Absolute,
    RelativeVanilla,
    RelativeRobust,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Absolute, Mode::RelativeVanilla, Mode::RelativeRobust];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Absolute => "absolute",
            Mode::RelativeVanilla => "relative_vanilla",
            Mode::RelativeRobust => "relative_robust",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Mode::Absolute => 0,
            Mode::RelativeVanilla => 1,
            Mode::RelativeRobust => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn is_relative(self) -> bool {
        self != Mode::Absolute
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::parse("mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `x · Wᵀ + b` for a batch of rows.
    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_transposed(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MLPWeights {
    layers: Vec<DenseLayer>,
    activation: Activation,
    latent_layer: usize,
    linear_latent: bool,
    mode: Mode,
    running_stats: Option<BatchStats>,
}

impl MLPWeights {
    pub fn new(
        layers: Vec<DenseLayer>,
        activation: Activation,
        latent_layer: usize,
        linear_latent: bool,
        mode: Mode,
    ) -> Result<Self> {
        let l = layers.len();
        if l < 2 {
            return Err(Error::BadArchitecture(format!("need at least 2 layers, got {l}")));
        }
        if latent_layer < 1 || latent_layer >= l {
            return Err(Error::BadArchitecture(format!(
                "latent layer {latent_layer} outside 1..{l}"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() || layer.out_dim() == 0 || layer.in_dim() == 0 {
                return Err(Error::BadArchitecture(format!("layer {i} has inconsistent shape")));
            }
            if i > 0 {
                let prev = layers[i - 1].out_dim();
                let split = i == latent_layer && mode.is_relative();
                if !split && layer.in_dim() != prev {
                    return Err(Error::BadArchitecture(format!(
                        "layer {i} takes {} inputs but layer {} produces {prev}",
                        layer.in_dim(),
                        i - 1
                    )));
                }
            }
        }
        Ok(Self {
            layers,
            activation,
            latent_layer,
            linear_latent,
            mode,
            running_stats: None,
        })
    }

    /// Same architecture and metadata, new layer values.
    pub fn with_layers(&self, layers: Vec<DenseLayer>) -> Result<Self> {
        let mut out = Self::new(
            layers,
            self.activation,
            self.latent_layer,
            self.linear_latent,
            self.mode,
        )?;
        if out.layer_shapes() != self.layer_shapes() {
            return Err(Error::ArchitectureMismatch("layer shapes changed".into()));
        }
        out.running_stats = self.running_stats.clone();
        Ok(out)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(out, in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of encoder layers; the latent is the output of this layer.
    pub fn latent_layer(&self) -> usize {
        self.latent_layer
    }

    pub fn linear_latent(&self) -> bool {
        self.linear_latent
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[self.latent_layer - 1].out_dim()
    }

    pub fn head_input_dim(&self) -> usize {
        self.layers[self.latent_layer].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn running_stats(&self) -> Option<&BatchStats> {
        self.running_stats.as_ref()
    }

    pub fn set_running_stats(&mut self, stats: Option<BatchStats>) -> Result<()> {
        if let Some(s) = &stats {
            if s.dim() != self.latent_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.latent_dim(),
                    got: s.dim(),
                });
            }
        }
        self.running_stats = stats;
        Ok(())
    }

    /// Activation after layer `i` (0-based), `None` for the output layer.
    pub fn layer_activation(&self, i: usize) -> Option<Activation> {
        if i + 1 >= self.layers.len() {
            None
        } else if self.linear_latent && i + 1 == self.latent_layer {
            Some(Activation::Identity)
        } else {
            Some(self.activation)
        }
    }

    fn run_layers(&self, range: std::ops::Range<usize>, x: &Matrix) -> Result<ForwardCache> {
        let first = &self.layers[range.start];
        if x.cols() != first.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: first.in_dim(),
                got: x.cols(),
            });
        }
        let mut inputs = Vec::with_capacity(range.len());
        let mut pre = Vec::with_capacity(range.len());
        let mut current = x.clone();
        for i in range.clone() {
            let z = self.layers[i].affine(&current)?;
            let next = match self.layer_activation(i) {
                Some(act) if act != Activation::Identity => act.apply_matrix(&z),
                _ => z.clone(),
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        Ok(ForwardCache {
            start: range.start,
            inputs,
            pre,
            output: current,
        })
    }

    fn check_direct(&self) -> Result<()> {
        if self.head_input_dim() != self.latent_dim() || self.mode.is_relative() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} network has no direct latent-to-head path",
                self.mode
            )));
        }
        Ok(())
    }

    /// Full pass through every layer; only defined for absolute-mode networks.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_direct()?;
        let cache = self.run_layers(0..self.layers.len(), x)?;
        Ok((cache.output.clone(), cache))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Encoder output `φ_m(x)`.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run_layers(0..self.latent_layer, x)?.output)
    }

    pub fn encode_with_cache(&self, x: &Matrix) -> Result<ForwardCache> {
        self.run_layers(0..self.latent_layer, x)
    }

    /// Head `γ_m` applied to whatever the head consumes.
    pub fn head(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.run_layers(self.latent_layer..self.layers.len(), z)?.output)
    }

    pub fn head_with_cache(&self, z: &Matrix) -> Result<ForwardCache> {
        self.run_layers(self.latent_layer..self.layers.len(), z)
    }

    /// Output after layer `m` (1-based), i.e. `φ_m` for any split point.
    pub fn hidden(&self, x: &Matrix, m: usize) -> Result<Matrix> {
        if m == 0 || m > self.layers.len() {
            return Err(Error::BadArchitecture(format!("no layer {m}")));
        }
        Ok(self.run_layers(0..m, x)?.output)
    }

    /// Reverse pass through the layers a cache covers. `d_output` is the
    /// gradient w.r.t. the cache output. Returns per-layer gradients and the
    /// gradient w.r.t. the cache input.
    pub fn backward_segment(
        &self,
        cache: &ForwardCache,
        d_output: &Matrix,
    ) -> Result<(Vec<LayerGrad>, Matrix)> {
        self.check_cache(cache)?;
        if d_output.rows() != cache.output.rows() || d_output.cols() != cache.output.cols() {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient is {}x{}, output is {}x{}",
                d_output.rows(),
                d_output.cols(),
                cache.output.rows(),
                cache.output.cols()
            )));
        }
        let mut grads = Vec::with_capacity(cache.pre.len());
        let mut d_post = d_output.clone();
        for offset in (0..cache.pre.len()).rev() {
            let i = cache.start + offset;
            let pre = &cache.pre[offset];
            let mut d_pre = d_post;
            if let Some(act) = self.layer_activation(i) {
                if act != Activation::Identity {
                    for (d, &z) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                        *d *= act.derivative(z);
                    }
                }
            }
            let weight = d_pre.transposed_matmul(&cache.inputs[offset])?;
            let mut bias = vec![0.0; d_pre.cols()];
            for row in d_pre.row_iter() {
                for (b, d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            d_post = d_pre.matmul(&self.layers[i].weight)?;
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok((grads, d_post))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let end = cache.start + cache.pre.len();
        if end > self.layers.len() || cache.inputs.len() != cache.pre.len() {
            return Err(Error::CacheMismatch("layer range out of bounds".into()));
        }
        for (offset, (input, pre)) in cache.inputs.iter().zip(&cache.pre).enumerate() {
            let layer = &self.layers[cache.start + offset];
            if input.cols() != layer.in_dim() || pre.cols() != layer.out_dim() || input.rows() != pre.rows() {
                return Err(Error::CacheMismatch(format!(
                    "layer {} shapes differ from cached values",
                    cache.start + offset
                )));
            }
        }
        Ok(())
    }

    /// Gradients of a loss whose gradient w.r.t. the logits is `dlogits`, plus
    /// an optional extra term injected at the latent layer.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        extra_latent_grad: Option<&Matrix>,
    ) -> Result<Gradients> {
        self.check_direct()?;
        if cache.start != 0 || cache.pre.len() != self.layers.len() {
            return Err(Error::CacheMismatch("cache does not span the full network".into()));
        }
        let m = self.latent_layer;
        let head_cache = cache.slice(m, self.layers.len());
        let enc_cache = cache.slice(0, m);
        let (head_grads, mut d_latent) = self.backward_segment(&head_cache, dlogits)?;
        if let Some(extra) = extra_latent_grad {
            if extra.rows() != d_latent.rows() || extra.cols() != d_latent.cols() {
                return Err(Error::DimensionMismatch {
                    expected: d_latent.cols(),
                    got: extra.cols(),
                });
            }
            for (d, e) in d_latent.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *d += e;
            }
        }
        let (enc_grads, _) = self.backward_segment(&enc_cache, &d_latent)?;
        Ok(Gradients {
            layers: enc_grads.into_iter().chain(head_grads).collect(),
        })
    }
}

/// Values recorded by a forward pass over layers `start..start + pre.len()`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    start: usize,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Affine output of each layer, before activation.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    fn slice(&self, from: usize, to: usize) -> ForwardCache {
        let (a, b) = (from - self.start, to - self.start);
        let output = if b < self.inputs.len() {
            self.inputs[b].clone()
        } else {
            self.output.clone()
        };
        ForwardCache {
            start: from,
            inputs: self.inputs[a..b].to_vec(),
            pre: self.pre[a..b].to_vec(),
            output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(weights: &MLPWeights) -> Self {
        Self {
            layers: weights
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.weight.as_slice().iter().chain(&g.bias))
            .fold(0.0, |a: f64, b| a.max(b.abs()))
    }
}

/// Builder for freshly initialized networks.
#[derive(Debug, Clone)]
pub struct MlpBuilder {
    sizes: Vec<usize>,
    activation: Activation,
    latent_layer: Option<usize>,
    linear_latent: bool,
    mode: Mode,
    head_input: Option<usize>,
    seed: u64,
}

impl MlpBuilder {
    /// `sizes = [n_0, n_1, …, n_l]`.
    pub fn new(sizes: &[usize], activation: Activation) -> Self {
        Self {
            sizes: sizes.to_vec(),
            activation,
            latent_layer: None,
            linear_latent: false,
            mode: Mode::Absolute,
            head_input: None,
            seed: 0,
        }
    }

    /// Defaults to the last hidden layer.
    pub fn latent_layer(mut self, m: usize) -> Self {
        self.latent_layer = Some(m);
        self
    }

    pub fn linear_latent(mut self, yes: bool) -> Self {
        self.linear_latent = yes;
        self
    }

    /// Relative modes need the anchor count, which becomes the head input width.
    pub fn mode(mut self, mode: Mode, anchors: Option<usize>) -> Self {
        self.mode = mode;
        self.head_input = anchors;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build(&self) -> Result<MLPWeights> {
        let sizes = &self.sizes;
        if sizes.len() < 3 || sizes.contains(&0) {
            return Err(Error::BadArchitecture(format!(
                "need at least 2 layers with positive widths, got sizes {sizes:?}"
            )));
        }
        let l = sizes.len() - 1;
        let m = self.latent_layer.unwrap_or(l - 1);
        if m < 1 || m >= l {
            return Err(Error::BadArchitecture(format!("latent layer {m} outside 1..{l}")));
        }
        let head_input = match (self.mode.is_relative(), self.head_input) {
            (false, _) => sizes[m],
            (true, Some(k)) if k > 0 => k,
            (true, _) => {
                return Err(Error::BadArchitecture(
                    "relative modes need a positive anchor count".into(),
                ))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let layers = (0..l)
            .map(|i| {
                let n_in = if i == m { head_input } else { sizes[i] };
                let n_out = sizes[i + 1];
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                DenseLayer {
                    weight: Matrix::from_fn(n_out, n_in, |_, _| rng.random_range(-bound..=bound)),
                    bias: vec![0.0; n_out],
                }
            })
            .collect();
        MLPWeights::new(layers, self.activation, m, self.linear_latent, self.mode)
    }
}

/// Xavier-uniform weights, zero biases; the latent is the last hidden layer.
pub fn init_mlp(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<MLPWeights> {
    MlpBuilder::new(layer_sizes, activation).seed(seed).build()
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.rows(),
            right: labels.len(),
        });
    }
    let classes = logits.cols();
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *g = (p - if c == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix, tol: f64) {
        let h = 1e-6;
        let mut num = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            num.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        let diff = num.max_abs_diff(analytic);
        let scale = num.as_slice().iter().chain(analytic.as_slice()).fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(diff / scale.max(1e-12) <= tol, "diff {diff} scale {scale}");
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_mlp(&[4, 8, 3], Activation::Relu, 7).unwrap();
        let b = init_mlp(&[4, 8, 3], Activation::Relu, 7).unwrap();
        assert_eq!(a, b);
        for layer in a.layers() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let bound = (6.0 / (layer.in_dim() + layer.out_dim()) as f64).sqrt();
            assert!(layer.weight.as_slice().iter().all(|w| w.abs() <= bound));
        }
        assert_ne!(a, init_mlp(&[4, 8, 3], Activation::Relu, 8).unwrap());
    }

    #[test]
    fn bad_architectures() {
        assert!(matches!(init_mlp(&[4, 3], Activation::Relu, 0), Err(Error::BadArchitecture(_))));
        assert!(matches!(init_mlp(&[4, 0, 3], Activation::Relu, 0), Err(Error::BadArchitecture(_))));
        assert!(matches!(
            MlpBuilder::new(&[4, 8, 3], Activation::Relu).latent_layer(2).build(),
            Err(Error::BadArchitecture(_))
        ));
        assert!(matches!(
            MlpBuilder::new(&[4, 8, 3], Activation::Relu).mode(Mode::RelativeRobust, None).build(),
            Err(Error::BadArchitecture(_))
        ));
    }

    #[test]
    fn identity_two_layer_by_hand() {
        let l1 = DenseLayer {
            weight: Matrix::from_rows(&[[1.0, 2.0], [0.0, -1.0]]).unwrap(),
            bias: vec![0.5, 1.0],
        };
        let l2 = DenseLayer {
            weight: Matrix::from_rows(&[[2.0, 1.0], [1.0, 1.0]]).unwrap(),
            bias: vec![0.0, -1.0],
        };
        let w = MLPWeights::new(vec![l1, l2], Activation::Identity, 1, false, Mode::Absolute).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        // h = (3.5, 0), f = (7, 2.5)
        assert_eq!(w.predict(&x).unwrap().row(0), &[7.0, 2.5]);
    }

    #[test]
    fn zero_input_relu_gives_zero_logits() {
        let w = init_mlp(&[3, 5, 4, 2], Activation::Relu, 1).unwrap();
        let out = w.predict(&Matrix::zeros(2, 3)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = init_mlp(&[3, 6, 5, 2], Activation::Gelu, 4).unwrap();
        let x = Matrix::random_normal(4, 3, &mut rng);
        let out = w.predict(&x).unwrap();
        for r in 0..4 {
            let mut h = x.row(r).to_vec();
            for (i, layer) in w.layers().iter().enumerate() {
                let mut next = vec![0.0; layer.out_dim()];
                for o in 0..layer.out_dim() {
                    let mut s = layer.bias[o];
                    for j in 0..layer.in_dim() {
                        s += layer.weight[(o, j)] * h[j];
                    }
                    next[o] = if i + 1 < w.num_layers() { Activation::Gelu.apply(s) } else { s };
                }
                h = next;
            }
            for (a, b) in h.iter().zip(out.row(r)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(matches!(w.predict(&Matrix::zeros(1, 4)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn encode_then_head_is_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = MlpBuilder::new(&[3, 7, 5, 4, 2], Activation::Sigmoid).latent_layer(2).seed(1).build().unwrap();
        for _ in 0..20 {
            let x = Matrix::random_normal(5, 3, &mut rng);
            let z = w.encode(&x).unwrap();
            assert_eq!(z.cols(), 5);
            assert_eq!(w.head(&z).unwrap(), w.predict(&x).unwrap());
        }
    }

    #[test]
    fn linear_latent_skips_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = MlpBuilder::new(&[3, 7, 5, 2], Activation::Relu).linear_latent(true).seed(1).build().unwrap();
        let x = Matrix::random_normal(30, 3, &mut rng);
        let z = w.encode(&x).unwrap();
        assert!(z.as_slice().iter().any(|&v| v < 0.0));
        assert_eq!(w.layer_activation(1), Some(Activation::Identity));
        assert_eq!(w.layer_activation(0), Some(Activation::Relu));
        assert_eq!(w.layer_activation(2), None);
    }

    #[test]
    fn relative_networks_have_no_direct_path() {
        let w = MlpBuilder::new(&[3, 7, 5, 2], Activation::Relu)
            .mode(Mode::RelativeRobust, Some(4))
            .build()
            .unwrap();
        assert_eq!(w.head_input_dim(), 4);
        assert_eq!(w.latent_dim(), 5);
        assert!(matches!(w.predict(&Matrix::zeros(1, 3)), Err(Error::ArchitectureMismatch(_))));
        assert_eq!(w.head(&Matrix::zeros(2, 4)).unwrap().cols(), 2);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = softmax_cross_entropy(&Matrix::zeros(3, 5), &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((loss - 1.6094379).abs() < 1e-7);
        let big = Matrix::from_rows(&[[1000.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&big, &[0]).unwrap();
        assert!(loss < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&Matrix::zeros(1, 3), &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::random_normal(4, 3, &mut rng);
        let labels = [0, 2, 1, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        fd_check(|l| softmax_cross_entropy(l, &labels).unwrap().0, &logits, &grad, 1e-6);
    }

    fn params_fd(w: &MLPWeights, f: &dyn Fn(&MLPWeights) -> f64, grads: &Gradients, tol: f64) {
        let h = 1e-6;
        for (li, layer) in w.layers().iter().enumerate() {
            for idx in 0..layer.weight.as_slice().len() + layer.bias.len() {
                let eval = |delta: f64| {
                    let mut layers = w.layers().to_vec();
                    if idx < layer.weight.as_slice().len() {
                        layers[li].weight.as_mut_slice()[idx] += delta;
                    } else {
                        layers[li].bias[idx - layer.weight.as_slice().len()] += delta;
                    }
                    f(&w.with_layers(layers).unwrap())
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = if idx < layer.weight.as_slice().len() {
                    grads.layers[li].weight.as_slice()[idx]
                } else {
                    grads.layers[li].bias[idx - layer.weight.as_slice().len()]
                };
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                assert!(err <= tol, "layer {li} param {idx}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = init_mlp(&[4, 8, 6, 3], Activation::Relu, 9).unwrap();
        let x = Matrix::random_normal(4, 4, &mut rng);
        let labels = [0, 1, 2, 1];
        let (logits, cache) = w.forward(&x).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let grads = w.backward(&cache, &dlogits, None).unwrap();
        params_fd(
            &w,
            &|v: &MLPWeights| softmax_cross_entropy(&v.predict(&x).unwrap(), &labels).unwrap().0,
            &grads,
            1e-5,
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let w = init_mlp(&[4, 8, 3], Activation::Relu, 9).unwrap();
        let x = Matrix::random_normal(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let (_, cache) = w.forward(&x).unwrap();
        let g = w.backward(&cache, &Matrix::zeros(3, 3), None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn injected_latent_gradient_backprops_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = init_mlp(&[3, 6, 5, 2], Activation::Gelu, 2).unwrap();
        let x = Matrix::random_normal(4, 3, &mut rng);
        let g = Matrix::random_normal(4, 5, &mut rng);
        let (_, cache) = w.forward(&x).unwrap();
        let grads = w.backward(&cache, &Matrix::zeros(4, 2), Some(&g)).unwrap();
        let inner = |v: &MLPWeights| crate::linalg::dot(v.encode(&x).unwrap().as_slice(), g.as_slice());
        params_fd(&w, &inner, &grads, 1e-5);
        // head layers receive nothing
        assert!(grads.layers[2].weight.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cache_mismatch_is_reported() {
        let w = init_mlp(&[3, 6, 2], Activation::Relu, 2).unwrap();
        let other = init_mlp(&[3, 4, 2], Activation::Relu, 2).unwrap();
        let x = Matrix::zeros(2, 3);
        let (_, cache) = other.forward(&x).unwrap();
        assert!(matches!(
            w.backward(&cache, &Matrix::zeros(2, 2), None),
            Err(Error::CacheMismatch(_))
        ));
    }
}
