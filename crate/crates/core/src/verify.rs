//! Property suites with independent oracles, shared by the `verify` command
//! and the test suite.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batching::{Dataset, TopoLoader, TrainBatch};
use crate::error::{Error, Result};
use crate::geometry::{
    batch_stats, relative_transform_batch, robust_relative_transform_batch, transform_anchors, AnchorSet,
    LatentBatch, ScaledPermutation,
};
use crate::linalg::{norm, random_orthogonal, Matrix};
use crate::model::train::{composite_objective, encode_anchors, Jitter, Placement, TopoConfig};
use crate::model::{MLPWeights, MlpBuilder, Mode};
use crate::stitching::{stitched_logits, EvalStats};
use crate::symmetry::{
    intertwiner_transform_encoder, intertwiner_transform_weights, verify_network_invariance, Activation,
    IntertwinerElement,
};
use crate::topology::{death_times, densification_loss, densification_loss_gradient, minimum_spanning_tree};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Invariance,
    Gradients,
    Oracle,
    Intertwiner,
    All,
}

impl Suite {
    pub const EACH: [Suite; 4] = [Suite::Invariance, Suite::Gradients, Suite::Oracle, Suite::Intertwiner];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Invariance => "invariance",
            Suite::Gradients => "gradients",
            Suite::Oracle => "oracle",
            Suite::Intertwiner => "intertwiner",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown suite '{s}'")))
    }
}

/// Which side of the tolerance a check must land on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub cases: usize,
    /// Worst observed value: the largest deviation for `AtMost`, the smallest for `Above`.
    pub worst: f64,
    pub bound: Bound,
    pub tolerance: f64,
}

impl Check {
    fn new(suite: Suite, name: &str, cases: usize, worst: f64, bound: Bound, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.to_string(),
            cases,
            worst,
            bound,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.worst <= self.tolerance,
            Bound::Above => self.worst > self.tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::Above => ">",
        };
        write!(
            f,
            "{} {}/{}: worst {:.3e} (need {op} {:.0e}) over {} cases",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.worst,
            self.tolerance,
            self.cases
        )
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    Ok(match suite {
        Suite::Invariance => invariance_suite(seed)?,
        Suite::Gradients => gradients_suite(seed)?,
        Suite::Oracle => oracle_suite(seed)?,
        Suite::Intertwiner => intertwiner_suite(seed)?,
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::EACH {
                out.extend(run_suite(s, seed)?);
            }
            out
        }
    })
}

pub fn invariance_suite(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        robust_scaled_permutation_invariance(seed, 100)?,
        vanilla_orthogonal_isotropic_invariance(seed, 100)?,
        vanilla_anisotropic_counterexample()?,
        robust_anisotropic_counterexample()?,
    ])
}

pub fn gradients_suite(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![densification_gradient_check(seed, 50)?, composite_gradient_check(seed)?])
}

pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    let (deaths, prim) = persistence_oracle_checks(seed, 100)?;
    Ok(vec![deaths, prim])
}

pub fn intertwiner_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = network_invariance_checks(seed, 20)?;
    out.extend(flagship_checks(seed)?);
    Ok(out)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::stitching::derive_seed(seed, &[0x7e57, stream]))
}

fn robust(batch: &Matrix, anchors: &AnchorSet) -> Result<Matrix> {
    let stats = batch_stats(&LatentBatch::new(batch.clone())?)?;
    robust_relative_transform_batch(batch, anchors, &stats)
}

/// `T_rob` is unchanged when batch and anchors undergo the same `z ↦ DPz + h`.
pub fn robust_scaled_permutation_invariance(seed: u64, cases: usize) -> Result<Check> {
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let m = [4, 64, 512][case % 3];
        let b = Matrix::random_normal(64, m, &mut rng);
        let anchors = AnchorSet::with_sequential_ids(Matrix::random_normal(m / 2, m, &mut rng))?;
        let g = ScaledPermutation::random(m, 0.1, 10.0, false, true, &mut rng);
        let before = robust(&b, &anchors)?;
        let after = robust(&g.apply_rows(&b)?, &transform_anchors(&anchors, &g)?)?;
        worst = worst.max(before.max_abs_diff(&after));
    }
    Ok(Check::new(Suite::Invariance, "robust_scaled_permutation", cases, worst, Bound::AtMost, 1e-9))
}

/// `T_rel` is unchanged under `z ↦ sQz` for orthogonal `Q` and `s > 0`.
pub fn vanilla_orthogonal_isotropic_invariance(seed: u64, cases: usize) -> Result<Check> {
    let mut rng = rng_for(seed, 2);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let m = [4, 16, 64][case % 3];
        let b = Matrix::random_normal(64, m, &mut rng);
        let a = Matrix::random_normal(m / 2, m, &mut rng);
        let s = rng.random_range(0.1f64.ln()..=10.0f64.ln()).exp();
        let q = random_orthogonal(m, &mut rng).map(|x| s * x);
        let before = relative_transform_batch(&b, &AnchorSet::with_sequential_ids(a.clone())?)?;
        let after = relative_transform_batch(
            &b.matmul_transposed(&q)?,
            &AnchorSet::with_sequential_ids(a.matmul_transposed(&q)?)?,
        )?;
        worst = worst.max(before.max_abs_diff(&after));
    }
    Ok(Check::new(Suite::Invariance, "vanilla_orthogonal_isotropic", cases, worst, Bound::AtMost, 1e-9))
}

fn counterexample() -> Result<(Matrix, AnchorSet, ScaledPermutation)> {
    let b = Matrix::from_rows(&[[0.3, 0.8], [1.0, -0.2], [-0.5, 0.4], [0.9, 1.1]])?;
    let a = AnchorSet::with_sequential_ids(Matrix::from_rows(&[[1.0, 1.0], [1.0, -0.5]])?)?;
    let g = ScaledPermutation::new(vec![0, 1], vec![1.0, 10.0], vec![0.0, 0.0])?;
    Ok((b, a, g))
}

/// `diag(1, 10)` breaks `T_rel`.
pub fn vanilla_anisotropic_counterexample() -> Result<Check> {
    let (b, a, g) = counterexample()?;
    let before = relative_transform_batch(&b, &a)?;
    let after = relative_transform_batch(&g.apply_rows(&b)?, &transform_anchors(&a, &g)?)?;
    Ok(Check::new(
        Suite::Invariance,
        "vanilla_breaks_under_diag_1_10",
        1,
        before.max_abs_diff(&after),
        Bound::Above,
        1e-3,
    ))
}

/// The same `diag(1, 10)` leaves `T_rob` intact.
pub fn robust_anisotropic_counterexample() -> Result<Check> {
    let (b, a, g) = counterexample()?;
    let before = robust(&b, &a)?;
    let after = robust(&g.apply_rows(&b)?, &transform_anchors(&a, &g)?)?;
    Ok(Check::new(
        Suite::Invariance,
        "robust_survives_diag_1_10",
        1,
        before.max_abs_diff(&after),
        Bound::AtMost,
        1e-9,
    ))
}

/// Norm-wise relative error of an analytic gradient against a numeric one.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Smallest gap between distinct pairwise distances and between any distance and `beta`.
fn distance_margin(classes: &[Matrix], beta: f64) -> f64 {
    let mut margin = f64::INFINITY;
    for c in classes {
        let mut d = Vec::new();
        for i in 0..c.rows() {
            for j in i + 1..c.rows() {
                let w = norm(&c.row(i).iter().zip(c.row(j)).map(|(a, b)| a - b).collect::<Vec<_>>());
                d.push(w);
            }
        }
        d.sort_by(f64::total_cmp);
        for w in d.windows(2) {
            margin = margin.min(w[1] - w[0]);
        }
        for w in &d {
            margin = margin.min((w - beta).abs());
        }
    }
    margin
}

fn to_batches(classes: &[Matrix]) -> Result<Vec<LatentBatch>> {
    classes.iter().map(|c| LatentBatch::new(c.clone())).collect()
}

/// Densification gradient against central differences with step `1e-6`.
pub fn densification_gradient_check(seed: u64, cases: usize) -> Result<Check> {
    let mut rng = rng_for(seed, 3);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let k = rng.random_range(1..=3);
        let m = rng.random_range(2..=5);
        let classes: Vec<Matrix> = (0..k)
            .map(|_| Matrix::random_normal(rng.random_range(3..=8), m, &mut rng))
            .collect();
        let beta = rng.random_range(0.2..2.0);
        if distance_margin(&classes, beta) < 1e-3 {
            continue;
        }
        let grads = densification_loss_gradient(&to_batches(&classes)?, beta)?;
        for (c, g) in grads.iter().enumerate() {
            let mut numeric = vec![0.0; g.as_slice().len()];
            for (idx, slot) in numeric.iter_mut().enumerate() {
                let mut plus = classes.clone();
                plus[c].as_mut_slice()[idx] += h;
                let mut minus = classes.clone();
                minus[c].as_mut_slice()[idx] -= h;
                *slot = (densification_loss(&to_batches(&plus)?, beta)? - densification_loss(&to_batches(&minus)?, beta)?)
                    / (2.0 * h);
            }
            worst = worst.max(relative_error(g.as_slice(), &numeric));
        }
        done += 1;
    }
    Ok(Check::new(Suite::Gradients, "densification_loss", cases, worst, Bound::AtMost, 1e-5))
}

fn gaussian_toy(seed: u64, classes: usize, per_class: usize, dim: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut x = Matrix::random_normal(n, dim, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &l) in labels.iter().enumerate() {
        x[(i, l % dim)] += 3.0;
    }
    Dataset::new(x, labels)
}

fn perturbed(weights: &MLPWeights, layer: usize, idx: usize, delta: f64) -> Result<MLPWeights> {
    let mut layers = weights.layers().to_vec();
    let l = &mut layers[layer];
    let nw = l.weight.as_slice().len();
    if idx < nw {
        l.weight.as_mut_slice()[idx] += delta;
    } else {
        l.bias[idx - nw] += delta;
    }
    weights.with_layers(layers)
}

fn composite_case(mode: Mode, placement: Placement, seed: u64) -> Result<f64> {
    let ds = gaussian_toy(seed, 3, 12, 3)?;
    let k = 4;
    let weights = MlpBuilder::new(&[3, 6, 5, 3], Activation::Gelu)
        .mode(mode, mode.is_relative().then_some(k))
        .seed(seed)
        .build()?;
    let anchors = if mode.is_relative() {
        Some(encode_anchors(&weights, &ds, &[0, 7, 13, 26])?)
    } else {
        None
    };
    let mut loader = TopoLoader::new(ds.labels(), 4, seed)?;
    let batch: TrainBatch = loader.next_batch().gather(&ds);
    let topo = TopoConfig {
        lambda_pre: 0.3,
        lambda_post: 0.7,
        beta: 0.5,
        period_steps: 0,
        placement,
    };
    let jitter = Jitter { scale: 1e-9, seed, step: 0 };
    let sched = 0.8;
    let total = |w: &MLPWeights| -> Result<f64> {
        Ok(composite_objective(w, &batch, anchors.as_ref(), &topo, sched, &jitter)?.objective.total)
    };
    let eval = composite_objective(&weights, &batch, anchors.as_ref(), &topo, sched, &jitter)?;
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (li, lg) in eval.gradients.layers.iter().enumerate() {
        let params = lg.weight.as_slice().len() + lg.bias.len();
        analytic.extend_from_slice(lg.weight.as_slice());
        analytic.extend_from_slice(&lg.bias);
        for idx in 0..params {
            let up = total(&perturbed(&weights, li, idx, h)?)?;
            let down = total(&perturbed(&weights, li, idx, -h)?)?;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Full training objective gradient for every mode and placement.
pub fn composite_gradient_check(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for mode in Mode::ALL {
        for placement in [Placement::None, Placement::Pre, Placement::Post, Placement::Combined] {
            for s in 0..2 {
                worst = worst.max(composite_case(mode, placement, crate::stitching::derive_seed(seed, &[mode.tag() as u64, s]))?);
                cases += 1;
            }
        }
    }
    Ok(Check::new(Suite::Gradients, "composite_objective", cases, worst, Bound::AtMost, 1e-5))
}

/// Death times by sweeping all pairs in distance order through a plain
/// union-find; independent of the MST code.
pub fn sweep_death_times(points: &Matrix) -> Vec<f64> {
    let n = points.rows();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut deaths = Vec::new();
    for (d, i, j) in pairs {
        let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            deaths.push(d);
        }
    }
    deaths
}

/// Total MST length by Prim's algorithm on the dense distance matrix.
pub fn prim_total_length(points: &Matrix) -> f64 {
    let n = points.rows();
    let dist = |i: usize, j: usize| -> f64 {
        points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]))
            .expect("vertex left");
        in_tree[v] = true;
        total += best[v];
        for u in 0..n {
            if !in_tree[u] {
                best[u] = best[u].min(dist(u, v));
            }
        }
    }
    total
}

/// Kruskal death times against the sweep oracle, and MST length against Prim.
pub fn persistence_oracle_checks(seed: u64, cases: usize) -> Result<(Check, Check)> {
    let mut rng = rng_for(seed, 4);
    let mut worst_deaths = 0.0f64;
    let mut worst_total = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(2..=30);
        let m = rng.random_range(1..=8);
        let points = Matrix::random_normal(n, m, &mut rng);
        let batch = LatentBatch::new(points.clone())?;
        let mut ours = death_times(&batch)?.deaths().to_vec();
        ours.sort_by(f64::total_cmp);
        let oracle = sweep_death_times(&points);
        if ours.len() != oracle.len() {
            worst_deaths = f64::INFINITY;
            continue;
        }
        for (a, b) in ours.iter().zip(&oracle) {
            worst_deaths = worst_deaths.max((a - b).abs());
        }
        let mst: f64 = minimum_spanning_tree(&batch)?.iter().map(|e| e.length).sum();
        worst_total = worst_total.max((mst - prim_total_length(&points)).abs());
    }
    Ok((
        Check::new(Suite::Oracle, "death_times_vs_sweep", cases, worst_deaths, Bound::AtMost, 1e-12),
        Check::new(Suite::Oracle, "mst_length_vs_prim", cases, worst_total, Bound::AtMost, 1e-12),
    ))
}

/// Intertwiner-transformed networks compute the same function.
pub fn network_invariance_checks(seed: u64, per_activation: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (ai, act) in [Activation::Relu, Activation::Gelu, Activation::Sigmoid].into_iter().enumerate() {
        let mut rng = rng_for(seed, 10 + ai as u64);
        let mut worst = 0.0f64;
        for _ in 0..per_activation {
            let sizes = [
                rng.random_range(2..=6),
                rng.random_range(3..=10),
                rng.random_range(3..=10),
                rng.random_range(2..=5),
            ];
            let w = MlpBuilder::new(&sizes, act).seed(rng.random()).build()?;
            let elems = vec![
                IntertwinerElement::random(act, sizes[1], 4.0, &mut rng)?,
                IntertwinerElement::random(act, sizes[2], 4.0, &mut rng)?,
            ];
            let t = intertwiner_transform_weights(&w, &elems)?;
            let x = LatentBatch::new(Matrix::random_normal(64, sizes[0], &mut rng))?;
            worst = worst.max(verify_network_invariance(&w, &t, &x)?);
        }
        out.push(Check::new(
            Suite::Intertwiner,
            &format!("network_invariance_{act}"),
            per_activation,
            worst,
            Bound::AtMost,
            1e-8,
        ));
    }
    Ok(out)
}

/// Non-isotropic positive diagonal scaling with max/min ratio 8, composed with a permutation.
fn latent_element<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<IntertwinerElement> {
    let g = ScaledPermutation::random(m, 0.5, 4.0, false, false, rng);
    let mut scale = g.scale().to_vec();
    scale[0] = 0.5;
    scale[m - 1] = 4.0;
    IntertwinerElement::new(Activation::Identity, g.perm().to_vec(), scale)
}

/// Flagship pair for `act`: logit deviations of robust and absolute stitching.
pub fn flagship_deviations(act: Activation, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, hidden, latent, classes, k) = (6, 12, 8, 3, 8);
    let sizes = [input, hidden, latent, classes];
    let data = Matrix::random_normal(200, input, &mut rng);
    let x = Matrix::random_normal(64, input, &mut rng);
    let build = |mode: Mode| {
        MlpBuilder::new(&sizes, act)
            .linear_latent(true)
            .mode(mode, mode.is_relative().then_some(k))
            .seed(seed)
            .build()
    };
    let elems = vec![IntertwinerElement::random(act, hidden, 3.0, &mut rng)?, latent_element(latent, &mut rng)?];

    let mut a = build(Mode::RelativeRobust)?;
    let ds = Dataset::new(data.clone(), vec![0; data.rows()])?;
    let anchor_idx: Vec<usize> = (0..k).map(|i| i * 17).collect();
    let anchors_a = encode_anchors(&a, &ds, &anchor_idx)?;
    a.set_running_stats(Some(batch_stats(&LatentBatch::new(a.encode(&data)?)?)?))?;
    let mut b = intertwiner_transform_encoder(&a, &elems)?;
    let g = elems[1].map();
    let anchors_b = transform_anchors(&anchors_a, g)?;
    b.set_running_stats(Some(a.running_stats().expect("stats set").transformed(g)?))?;
    let reference = stitched_logits(&a, &a, Some(&anchors_a), &x, EvalStats::Running)?;
    let robust_dev = stitched_logits(&b, &a, Some(&anchors_b), &x, EvalStats::Running)?.max_abs_diff(&reference);

    let abs_a = build(Mode::Absolute)?;
    let abs_b = intertwiner_transform_weights(&abs_a, &elems)?;
    let reference = stitched_logits(&abs_a, &abs_a, None, &x, EvalStats::Running)?;
    let absolute_dev = stitched_logits(&abs_b, &abs_a, None, &x, EvalStats::Running)?.max_abs_diff(&reference);
    Ok((robust_dev, absolute_dev))
}

pub fn flagship_checks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (ai, act) in [Activation::Relu, Activation::Gelu, Activation::Sigmoid].into_iter().enumerate() {
        let mut worst_robust = 0.0f64;
        let mut worst_absolute = f64::INFINITY;
        let cases = 5;
        for c in 0..cases {
            let (r, a) = flagship_deviations(act, crate::stitching::derive_seed(seed, &[20 + ai as u64, c]))?;
            worst_robust = worst_robust.max(r);
            worst_absolute = worst_absolute.min(a);
        }
        out.push(Check::new(
            Suite::Intertwiner,
            &format!("flagship_robust_stitch_{act}"),
            cases as usize,
            worst_robust,
            Bound::AtMost,
            1e-6,
        ));
        out.push(Check::new(
            Suite::Intertwiner,
            &format!("flagship_absolute_stitch_breaks_{act}"),
            cases as usize,
            worst_absolute,
            Bound::Above,
            1e-2,
        ));
    }
    Ok(out)
}
