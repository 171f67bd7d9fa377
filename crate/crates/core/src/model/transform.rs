//! The latent-to-head transform `T` with its reverse pass.
//!
//! Absolute mode passes the latent through. Vanilla mode maps each row to its
//! cosine similarities with the anchors. Robust mode first normalizes rows and
//! anchors with batch statistics; during training those statistics come from a
//! designated subset of rows and gradients flow through them, at inference a
//! fixed set of statistics is used. Anchors are constants.

use crate::error::{Error, Result};
use crate::geometry::{batch_stats_of, AnchorSet, BatchStats, ZERO_NORM};
use crate::linalg::{dot, norm, Matrix};

use super::Mode;

/// Where the robust normalization statistics come from.
#[derive(Debug, Clone, Copy)]
pub enum StatsSource<'a> {
    /// Computed from these rows of the latent batch; differentiated through.
    Rows(&'a [usize]),
    /// Computed from the whole latent batch; differentiated through.
    Batch,
    /// Frozen statistics, e.g. running estimates at inference.
    Fixed(&'a BatchStats),
}

#[derive(Debug, Clone)]
pub struct TransformCache {
    mode: Mode,
    /// Normalized latent rows (the latent itself in vanilla mode).
    u: Matrix,
    /// Normalized anchors.
    a: Matrix,
    out: Matrix,
    stats: Option<BatchStats>,
    stat_rows: Option<Vec<usize>>,
}

impl TransformCache {
    pub fn output(&self) -> &Matrix {
        &self.out
    }

    /// Statistics used by a robust pass.
    pub fn stats(&self) -> Option<&BatchStats> {
        self.stats.as_ref()
    }
}

fn normalize_with(m: &Matrix, stats: &BatchStats) -> Result<Matrix> {
    if m.cols() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: m.cols(),
        });
    }
    Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
        (m[(r, c)] - stats.mean[c]) / stats.std[c]
    }))
}

fn cosine_rows(u: &Matrix, a: &Matrix) -> Result<Matrix> {
    let un: Vec<f64> = u.row_iter().map(norm).collect();
    let an: Vec<f64> = a.row_iter().map(norm).collect();
    if un.iter().chain(&an).any(|&n| n < ZERO_NORM) {
        return Err(Error::ZeroVector {
            threshold: ZERO_NORM,
        });
    }
    Ok(Matrix::from_fn(u.rows(), a.rows(), |r, i| {
        (dot(u.row(r), a.row(i)) / (un[r] * an[i])).clamp(-1.0, 1.0)
    }))
}

fn check_rows(rows: &[usize], n: usize) -> Result<()> {
    match rows.iter().find(|&&r| r >= n) {
        Some(&r) => Err(Error::DimensionMismatch { expected: n, got: r + 1 }),
        None => Ok(()),
    }
}

/// Apply `T` for `mode` to a latent batch.
pub fn forward_transform(
    mode: Mode,
    z: &Matrix,
    anchors: Option<&AnchorSet>,
    source: StatsSource<'_>,
) -> Result<TransformCache> {
    let anchors = match (mode, anchors) {
        (Mode::Absolute, _) => {
            return Ok(TransformCache {
                mode,
                u: Matrix::zeros(0, 0),
                a: Matrix::zeros(0, 0),
                out: z.clone(),
                stats: None,
                stat_rows: None,
            })
        }
        (_, Some(a)) => a,
        (_, None) => return Err(Error::ArchitectureMismatch(format!("{mode} needs anchors"))),
    };
    if anchors.dim() != z.cols() {
        return Err(Error::DimensionMismatch {
            expected: anchors.dim(),
            got: z.cols(),
        });
    }
    if mode == Mode::RelativeVanilla {
        let out = cosine_rows(z, anchors.matrix())?;
        return Ok(TransformCache {
            mode,
            u: z.clone(),
            a: anchors.matrix().clone(),
            out,
            stats: None,
            stat_rows: None,
        });
    }
    let (stats, stat_rows) = match source {
        StatsSource::Rows(rows) => {
            check_rows(rows, z.rows())?;
            (batch_stats_of(&z.select_rows(rows))?, Some(rows.to_vec()))
        }
        StatsSource::Batch => (batch_stats_of(z)?, Some((0..z.rows()).collect())),
        StatsSource::Fixed(s) => (s.clone(), None),
    };
    let u = normalize_with(z, &stats)?;
    let a = normalize_with(anchors.matrix(), &stats)?;
    let out = cosine_rows(&u, &a)?;
    Ok(TransformCache {
        mode,
        u,
        a,
        out,
        stats: Some(stats),
        stat_rows,
    })
}

/// Gradient of `Σ G ⊙ cos(u, a)` w.r.t. `u` and `a`.
fn cosine_backward(u: &Matrix, a: &Matrix, c: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let un: Vec<f64> = u.row_iter().map(norm).collect();
    let an: Vec<f64> = a.row_iter().map(norm).collect();
    let mut du = Matrix::zeros(u.rows(), u.cols());
    let mut da = Matrix::zeros(a.rows(), a.cols());
    for r in 0..u.rows() {
        for i in 0..a.rows() {
            let gri = g[(r, i)];
            if gri == 0.0 {
                continue;
            }
            let cri = c[(r, i)];
            for j in 0..u.cols() {
                du[(r, j)] += gri * (a[(i, j)] / (an[i] * un[r]) - cri * u[(r, j)] / (un[r] * un[r]));
                da[(i, j)] += gri * (u[(r, j)] / (un[r] * an[i]) - cri * a[(i, j)] / (an[i] * an[i]));
            }
        }
    }
    (du, da)
}

/// Gradient w.r.t. the latent batch given the gradient w.r.t. the output.
pub fn backward_transform(cache: &TransformCache, d_out: &Matrix) -> Result<Matrix> {
    if d_out.rows() != cache.out.rows() || d_out.cols() != cache.out.cols() {
        return Err(Error::CacheMismatch(format!(
            "transform gradient is {}x{}, output is {}x{}",
            d_out.rows(),
            d_out.cols(),
            cache.out.rows(),
            cache.out.cols()
        )));
    }
    match cache.mode {
        Mode::Absolute => Ok(d_out.clone()),
        Mode::RelativeVanilla => Ok(cosine_backward(&cache.u, &cache.a, &cache.out, d_out).0),
        Mode::RelativeRobust => {
            let stats = cache.stats.as_ref().expect("robust cache has stats");
            let (du, da) = cosine_backward(&cache.u, &cache.a, &cache.out, d_out);
            let m = stats.dim();
            let mut dz = Matrix::from_fn(du.rows(), m, |r, j| du[(r, j)] / stats.std[j]);
            let Some(rows) = &cache.stat_rows else {
                return Ok(dz);
            };
            let mut dmu = vec![0.0; m];
            let mut dsigma = vec![0.0; m];
            for j in 0..m {
                let s = stats.std[j];
                for r in 0..du.rows() {
                    dmu[j] -= du[(r, j)] / s;
                    dsigma[j] -= du[(r, j)] * cache.u[(r, j)] / s;
                }
                for i in 0..da.rows() {
                    dmu[j] -= da[(i, j)] / s;
                    dsigma[j] -= da[(i, j)] * cache.a[(i, j)] / s;
                }
            }
            let n = rows.len() as f64;
            for &r in rows {
                for j in 0..m {
                    dz[(r, j)] += dmu[j] / n + dsigma[j] * cache.u[(r, j)] / n;
                }
            }
            Ok(dz)
        }
    }
}
