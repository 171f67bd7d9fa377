//! Anchor-based relative coordinates and their batch-normalized variant.
//!
//! The relative transform maps a latent vector `z` to its cosine similarities
//! against an ordered anchor set. It is invariant under `z ↦ αUz` for
//! orthogonal `U` and `α > 0`, but not under non-isotropic rescalings. The
//! robust transform first normalizes `z` and the anchors with the per-component
//! mean and standard deviation of a reference batch, which makes the result
//! invariant under every map `z ↦ DPz + h` (permutation `P`, invertible
//! diagonal `D`, shift `h`) applied jointly to `z`, the anchors and the batch.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-300;

/// Standard deviations below this make a batch unusable for normalization.
pub const MIN_STD: f64 = 1e-12;

fn check_finite(m: &Matrix) -> Result<()> {
    for (r, row) in m.row_iter().enumerate() {
        if let Some(c) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: r, col: c });
        }
    }
    Ok(())
}

/// Rows of latent vectors, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch(Matrix);

impl LatentBatch {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::EmptyMatrix {
                rows: data.rows(),
                cols: data.cols(),
            });
        }
        check_finite(&data)?;
        Ok(Self(data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Ordered anchors with stable identifiers. Position is semantic: component
/// `i` of a relative representation always refers to anchor `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Matrix,
    ids: Vec<u64>,
}

impl AnchorSet {
    pub fn new(anchors: Matrix, ids: Vec<u64>) -> Result<Self> {
        if anchors.rows() == 0 || anchors.cols() == 0 {
            return Err(Error::EmptyMatrix {
                rows: anchors.rows(),
                cols: anchors.cols(),
            });
        }
        if ids.len() != anchors.rows() {
            return Err(Error::LengthMismatch {
                left: anchors.rows(),
                right: ids.len(),
            });
        }
        check_finite(&anchors)?;
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateAnchorId(id));
            }
        }
        if anchors.row_iter().any(|a| norm(a) < ZERO_NORM) {
            return Err(Error::ZeroVector {
                threshold: ZERO_NORM,
            });
        }
        Ok(Self { anchors, ids })
    }

    /// Anchors numbered `0..k` in row order.
    pub fn with_sequential_ids(anchors: Matrix) -> Result<Self> {
        let ids = (0..anchors.rows() as u64).collect();
        Self::new(anchors, ids)
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn anchor(&self, i: usize) -> &[f64] {
        self.anchors.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.anchors
    }

    /// Same ids and order, new values (an anchor refresh).
    pub fn with_values(&self, anchors: Matrix) -> Result<Self> {
        if anchors.rows() != self.len() {
            return Err(Error::AnchorCountMismatch {
                expected: self.len(),
                got: anchors.rows(),
            });
        }
        Self::new(anchors, self.ids.clone())
    }
}

/// Per-component mean and (population) standard deviation of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BatchStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: std.len(),
            });
        }
        if let Some((column, &std)) = std
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s >= MIN_STD) || !s.is_finite())
        {
            return Err(Error::DegenerateBatch { column, std });
        }
        Ok(Self { mean, std })
    }

    /// Zero mean, unit deviation: normalization becomes the identity.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of the image of the batch under `g`.
    pub fn transformed(&self, g: &ScaledPermutation) -> Result<Self> {
        let mean = g.apply(&self.mean)?;
        let std = (0..g.dim())
            .map(|i| g.scale[i].abs() * self.std[g.perm[i]])
            .collect();
        Self::new(mean, std)
    }
}

pub fn batch_stats(batch: &LatentBatch) -> Result<BatchStats> {
    batch_stats_of(batch.matrix())
}

pub(crate) fn batch_stats_of(m: &Matrix) -> Result<BatchStats> {
    let n = m.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    let mut mean = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, &x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= n as f64);
    let mut var = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for ((acc, &x), &mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (x - mu) * (x - mu);
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    BatchStats::new(mean, std)
}

pub fn cosine_similarity(z: &[f64], w: &[f64]) -> Result<f64> {
    if z.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: w.len(),
        });
    }
    let (nz, nw) = (norm(z), norm(w));
    if nz < ZERO_NORM || nw < ZERO_NORM {
        return Err(Error::ZeroVector {
            threshold: ZERO_NORM,
        });
    }
    Ok((dot(z, w) / (nz * nw)).clamp(-1.0, 1.0))
}

pub fn relative_transform(z: &[f64], anchors: &AnchorSet) -> Result<Vec<f64>> {
    if z.len() != anchors.dim() {
        return Err(Error::DimensionMismatch {
            expected: anchors.dim(),
            got: z.len(),
        });
    }
    (0..anchors.len())
        .map(|i| cosine_similarity(z, anchors.anchor(i)))
        .collect()
}

/// Row-wise [`relative_transform`]; output is `rows × k`.
pub fn relative_transform_batch(batch: &Matrix, anchors: &AnchorSet) -> Result<Matrix> {
    let mut out = Matrix::zeros(batch.rows(), anchors.len());
    for r in 0..batch.rows() {
        let rel = relative_transform(batch.row(r), anchors)?;
        out.row_mut(r).copy_from_slice(&rel);
    }
    Ok(out)
}

pub fn gaussian_normalize(z: &[f64], stats: &BatchStats) -> Result<Vec<f64>> {
    if z.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: z.len(),
        });
    }
    Ok(z.iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((x, mu), s)| (x - mu) / s)
        .collect())
}

pub fn gaussian_denormalize(z: &[f64], stats: &BatchStats) -> Result<Vec<f64>> {
    if z.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: z.len(),
        });
    }
    Ok(z.iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((x, mu), s)| x * s + mu)
        .collect())
}

fn normalize_rows(m: &Matrix, stats: &BatchStats) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&gaussian_normalize(m.row(r), stats)?);
    }
    Ok(out)
}

/// Anchors normalized against `stats`, keeping ids.
pub fn normalize_anchors(anchors: &AnchorSet, stats: &BatchStats) -> Result<AnchorSet> {
    anchors.with_values(normalize_rows(anchors.matrix(), stats)?)
}

pub fn robust_relative_transform(
    z: &[f64],
    anchors: &AnchorSet,
    stats: &BatchStats,
) -> Result<Vec<f64>> {
    let normalized = normalize_anchors(anchors, stats)?;
    relative_transform(&gaussian_normalize(z, stats)?, &normalized)
}

/// Row-wise [`robust_relative_transform`]; anchors are normalized once.
pub fn robust_relative_transform_batch(
    batch: &Matrix,
    anchors: &AnchorSet,
    stats: &BatchStats,
) -> Result<Matrix> {
    let normalized = normalize_anchors(anchors, stats)?;
    relative_transform_batch(&normalize_rows(batch, stats)?, &normalized)
}

/// The affine map `z ↦ D·P·z + h`, stored as `output_i = scale_i · z_{perm(i)} + shift_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPermutation {
    perm: Vec<usize>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl ScaledPermutation {
    pub fn new(perm: Vec<usize>, scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        let m = perm.len();
        if scale.len() != m || shift.len() != m {
            return Err(Error::InvalidScaledPermutation(format!(
                "lengths perm={m} scale={} shift={}",
                scale.len(),
                shift.len()
            )));
        }
        let mut seen = vec![false; m];
        for &p in &perm {
            if p >= m || seen[p] {
                return Err(Error::InvalidScaledPermutation(format!(
                    "{perm:?} is not a permutation"
                )));
            }
            seen[p] = true;
        }
        if let Some(i) = scale.iter().position(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidScaledPermutation(format!(
                "scale[{i}] = {}",
                scale[i]
            )));
        }
        if shift.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidScaledPermutation("non-finite shift".into()));
        }
        Ok(Self { perm, scale, shift })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            perm: (0..m).collect(),
            scale: vec![1.0; m],
            shift: vec![0.0; m],
        }
    }

    /// Uniform permutation, log-uniform scale magnitudes in `[scale_min, scale_max]`,
    /// optional random signs, standard normal shift (or zero).
    pub fn random<R: Rng + ?Sized>(
        m: usize,
        scale_min: f64,
        scale_max: f64,
        signed: bool,
        with_shift: bool,
        rng: &mut R,
    ) -> Self {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(rng);
        let (lo, hi) = (scale_min.ln(), scale_max.ln());
        let scale = (0..m)
            .map(|_| {
                let s = rng.random_range(lo..=hi).exp();
                if signed && rng.random_bool(0.5) {
                    -s
                } else {
                    s
                }
            })
            .collect();
        let shift = (0..m)
            .map(|_| {
                if with_shift {
                    rng.sample(rand_distr::StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        Self { perm, scale, shift }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn is_linear(&self) -> bool {
        self.shift.iter().all(|h| *h == 0.0)
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok((0..self.dim())
            .map(|i| self.scale[i] * z[self.perm[i]] + self.shift[i])
            .collect())
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &ScaledPermutation) -> Result<Self> {
        if first.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: first.dim(),
            });
        }
        let m = self.dim();
        let mut perm = Vec::with_capacity(m);
        let mut scale = Vec::with_capacity(m);
        let mut shift = Vec::with_capacity(m);
        for j in 0..m {
            let p = self.perm[j];
            perm.push(first.perm[p]);
            scale.push(self.scale[j] * first.scale[p]);
            shift.push(self.scale[j] * first.shift[p] + self.shift[j]);
        }
        Ok(Self { perm, scale, shift })
    }

    pub fn inverse(&self) -> Self {
        let m = self.dim();
        let mut inv_perm = vec![0; m];
        for (i, &p) in self.perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        let scale = inv_perm.iter().map(|&q| 1.0 / self.scale[q]).collect();
        let shift = inv_perm
            .iter()
            .map(|&q| -self.shift[q] / self.scale[q])
            .collect();
        Self {
            perm: inv_perm,
            scale,
            shift,
        }
    }

    /// The linear part `D·P` as a dense matrix.
    pub fn linear_matrix(&self) -> Matrix {
        let m = self.dim();
        let mut out = Matrix::zeros(m, m);
        for i in 0..m {
            out[(i, self.perm[i])] = self.scale[i];
        }
        out
    }

    /// Image of every row.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let src = x.row(r);
            for (i, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = self.scale[i] * src[self.perm[i]] + self.shift[i];
            }
        }
        Ok(out)
    }
}

pub fn apply_scaled_permutation(x: &LatentBatch, g: &ScaledPermutation) -> Result<LatentBatch> {
    LatentBatch::new(g.apply_rows(x.matrix())?)
}

/// Image of every anchor under `g`, keeping ids.
pub fn transform_anchors(anchors: &AnchorSet, g: &ScaledPermutation) -> Result<AnchorSet> {
    anchors.with_values(g.apply_rows(anchors.matrix())?)
}
