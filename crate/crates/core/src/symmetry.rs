//! Activation functions, their intertwiner groups and the induced weight-space
//! symmetries of an MLP.
//!
//! An invertible `A` intertwines `σ` when `σ(A·x) = B·σ(x)` for some invertible
//! `B`; then `B = λ_σ(A) = σ(A)·σ(I)⁻¹`. Pushing `A_i` through consecutive
//! layers yields weights that compute the same function while every hidden
//! representation is mapped by `λ_σ(A_i)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{LatentBatch, ScaledPermutation};
use crate::linalg::{right_divide, Matrix};
use crate::model::{DenseLayer, MLPWeights};

/// Condition-number ceiling for `σ(I_n)`.
pub const MAX_CONDITION: f64 = 1e12;

/// Tolerance of the intertwiner membership check.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

const MEMBERSHIP_SAMPLES: usize = 32;
const MEMBERSHIP_SEED: u64 = 0x5eed_1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    Identity,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Gelu,
        Activation::Sigmoid,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * normal_cdf(x),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative; relu uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply_slice(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.apply(v)).collect()
    }

    pub fn apply_matrix(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::parse("activation", format!("unknown activation {s:?}")))
    }
}

/// `σ(A)·σ(I_n)⁻¹`, computed literally with a dense solve.
pub fn lambda_sigma(activation: Activation, a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let sigma_a = activation.apply_matrix(a);
    let sigma_i = activation.apply_matrix(&Matrix::identity(a.rows()));
    right_divide(&sigma_a, &sigma_i, MAX_CONDITION)
        .map_err(|condition| Error::SingularSigmaIdentity { condition })
}

/// Closed form for relu and non-negative `A`: `σ(A) = A` and `σ(I) = I`.
pub fn lambda_relu_nonnegative(a: &Matrix) -> Option<Matrix> {
    a.as_slice().iter().all(|&x| x >= 0.0).then(|| a.clone())
}

/// Largest `|σ(A·x) − λ_σ(A)·σ(x)|` over a fixed set of probe vectors.
pub fn membership_deviation(activation: Activation, a: &Matrix) -> Result<f64> {
    let lambda = lambda_sigma(activation, a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(MEMBERSHIP_SEED);
    let n = a.rows();
    let mut worst = 0.0f64;
    for _ in 0..MEMBERSHIP_SAMPLES {
        let x: Vec<f64> = (0..n)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lhs = activation.apply_slice(&a.mul_vec(&x)?);
        let rhs = lambda.mul_vec(&activation.apply_slice(&x))?;
        for (l, r) in lhs.iter().zip(&rhs) {
            worst = worst.max((l - r).abs());
        }
    }
    Ok(worst)
}

/// A scaled permutation `D·P` verified to intertwine its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct IntertwinerElement {
    activation: Activation,
    map: ScaledPermutation,
    lambda: Matrix,
}

impl IntertwinerElement {
    pub fn new(activation: Activation, perm: Vec<usize>, scale: Vec<f64>) -> Result<Self> {
        let n = perm.len();
        let map = ScaledPermutation::new(perm, scale, vec![0.0; n])?;
        Self::from_map(activation, map)
    }

    pub fn from_map(activation: Activation, map: ScaledPermutation) -> Result<Self> {
        if !map.is_linear() {
            return Err(Error::InvalidScaledPermutation(
                "intertwiner elements carry no shift".into(),
            ));
        }
        let matrix = map.linear_matrix();
        let deviation = membership_deviation(activation, &matrix)?;
        if !(deviation <= MEMBERSHIP_TOL) {
            return Err(Error::MembershipViolation { deviation });
        }
        let lambda = lambda_sigma(activation, &matrix)?;
        Ok(Self {
            activation,
            map,
            lambda,
        })
    }

    pub fn identity(activation: Activation, n: usize) -> Result<Self> {
        Self::from_map(activation, ScaledPermutation::identity(n))
    }

    /// Random element of the sampled family for `activation`: positive scales
    /// log-uniform in `[1/max_scale, max_scale]` for relu, any non-zero scale for
    /// identity, pure permutations otherwise.
    pub fn random<R: Rng + ?Sized>(
        activation: Activation,
        n: usize,
        max_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let map = match activation {
            Activation::Relu => ScaledPermutation::random(n, 1.0 / max_scale, max_scale, false, false, rng),
            Activation::Identity => {
                ScaledPermutation::random(n, 1.0 / max_scale, max_scale, true, false, rng)
            }
            Activation::Gelu | Activation::Sigmoid => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                ScaledPermutation::new(perm, vec![1.0; n], vec![0.0; n])?
            }
        };
        Self::from_map(activation, map)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn map(&self) -> &ScaledPermutation {
        &self.map
    }

    pub fn matrix(&self) -> Matrix {
        self.map.linear_matrix()
    }

    /// `λ_σ(A)`.
    pub fn lambda(&self) -> &Matrix {
        &self.lambda
    }

    pub fn inverse(&self) -> Result<Self> {
        Self::from_map(self.activation, self.map.inverse())
    }
}

/// Left-multiply a layer by `A` and right-multiply its weight by `right`.
fn conjugate_layer(layer: &DenseLayer, left: Option<&Matrix>, right: Option<&Matrix>) -> Result<DenseLayer> {
    let mut weight = layer.weight.clone();
    let mut bias = layer.bias.clone();
    if let Some(r) = right {
        weight = weight.matmul(r)?;
    }
    if let Some(a) = left {
        weight = a.matmul(&weight)?;
        bias = a.mul_vec(&bias)?;
    }
    Ok(DenseLayer { weight, bias })
}

/// Apply one intertwiner element per hidden layer. Layer `i` is multiplied on
/// the left by `A_i` and on the right by `λ(A_{i−1}⁻¹)`; the output layer only
/// gets the right factor.
pub fn intertwiner_transform_weights(
    weights: &MLPWeights,
    elements: &[IntertwinerElement],
) -> Result<MLPWeights> {
    let l = weights.num_layers();
    if elements.len() != l - 1 {
        return Err(Error::ArchitectureMismatch(format!(
            "{} layers need {} intertwiner elements, got {}",
            l,
            l - 1,
            elements.len()
        )));
    }
    transform_prefix(weights, elements, true)
}

/// Transform only the encoder layers `1..=m`, leaving the head untouched, so
/// the new latent is `A_m` times the old one.
pub fn intertwiner_transform_encoder(
    weights: &MLPWeights,
    elements: &[IntertwinerElement],
) -> Result<MLPWeights> {
    let m = weights.latent_layer();
    if elements.len() != m {
        return Err(Error::ArchitectureMismatch(format!(
            "encoder with {m} layers needs {m} intertwiner elements, got {}",
            elements.len()
        )));
    }
    transform_prefix(weights, elements, false)
}

fn transform_prefix(
    weights: &MLPWeights,
    elements: &[IntertwinerElement],
    compensate_after: bool,
) -> Result<MLPWeights> {
    let mut layers = Vec::with_capacity(weights.num_layers());
    let mut right: Option<Matrix> = None;
    for (i, layer) in weights.layers().iter().enumerate() {
        let left = match elements.get(i) {
            Some(elem) => {
                let act = weights.layer_activation(i).expect("hidden layer");
                if elem.activation() != act {
                    return Err(Error::ArchitectureMismatch(format!(
                        "layer {i} uses {act}, element is for {}",
                        elem.activation()
                    )));
                }
                if elem.dim() != layer.out_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: layer.out_dim(),
                        got: elem.dim(),
                    });
                }
                Some(elem.matrix())
            }
            None => None,
        };
        if left.is_none() && !compensate_after {
            right = None;
        }
        layers.push(conjugate_layer(layer, left.as_ref(), right.as_ref())?);
        right = match elements.get(i) {
            Some(elem) => Some(lambda_sigma(elem.activation(), &elem.map().inverse().linear_matrix())?),
            None => None,
        };
    }
    weights.with_layers(layers)
}

/// Max absolute difference of the network outputs over `samples`.
pub fn verify_network_invariance(
    original: &MLPWeights,
    transformed: &MLPWeights,
    samples: &LatentBatch,
) -> Result<f64> {
    if original.layer_shapes() != transformed.layer_shapes()
        || original.activation() != transformed.activation()
    {
        return Err(Error::ArchitectureMismatch(
            "networks have different shapes or activations".into(),
        ));
    }
    let a = original.predict(samples.matrix())?;
    let b = transformed.predict(samples.matrix())?;
    Ok(a.max_abs_diff(&b))
}
