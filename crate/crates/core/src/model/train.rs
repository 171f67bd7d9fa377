//! Composite objective and SGD training loop.
//!
//! `L = CE(head(T(φ(x))), y) + w · (λ₁ R_pre + λ₂ R_post)` where `R_pre` is the
//! densification loss of the class sub-batches in latent space, `R_post` the
//! same after the transform `T`, and `w` a triangular cyclic weight.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batching::{Dataset, TopoLoader, TrainBatch};
use crate::error::{Error, Result};
use crate::geometry::{AnchorSet, BatchStats};
use crate::linalg::Matrix;
use crate::topology::densification_on;

use super::transform::{backward_transform, forward_transform, StatsSource};
use super::{softmax_cross_entropy, Gradients, MLPWeights, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate_encoder: f64,
    pub learning_rate_head: f64,
    /// Per-layer factor applied going down from the latent layer.
    pub layerwise_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub anchor_refresh_steps: usize,
    pub mode: Mode,
    /// Sub-batch size `n`.
    pub batch_n: usize,
    /// Weight of the old value in the running statistics.
    pub stats_momentum: f64,
    /// Magnitude of the perturbation applied to duplicated rows.
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate_encoder: 0.05,
            learning_rate_head: 0.05,
            layerwise_decay: 0.65,
            epochs: 10,
            seed: 0,
            anchor_refresh_steps: 100,
            mode: Mode::RelativeRobust,
            batch_n: 16,
            stats_momentum: 0.9,
            jitter: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if !(self.learning_rate_encoder > 0.0 && self.learning_rate_head > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return bad(format!("layerwise decay {} outside (0, 1]", self.layerwise_decay));
        }
        if self.anchor_refresh_steps == 0 {
            return bad("anchor refresh interval must be positive".into());
        }
        if self.batch_n < 2 {
            return Err(Error::SubBatchTooSmall(self.batch_n));
        }
        if !(0.0..1.0).contains(&self.stats_momentum) {
            return bad(format!("stats momentum {} outside [0, 1)", self.stats_momentum));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter {} must be non-negative", self.jitter));
        }
        Ok(())
    }

    /// Step size of layer `i` (0-based) for a network with latent layer `m`.
    pub fn layer_rate(&self, i: usize, m: usize) -> f64 {
        if i < m {
            self.learning_rate_encoder * self.layerwise_decay.powi((m - 1 - i) as i32)
        } else {
            self.learning_rate_head
        }
    }
}

/// Where the densification loss is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    None,
    Pre,
    Post,
    Combined,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::None, Placement::Pre, Placement::Post, Placement::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Pre => "pre",
            Placement::Post => "post",
            Placement::Combined => "combined",
        }
    }

    pub fn uses_pre(self) -> bool {
        matches!(self, Placement::Pre | Placement::Combined)
    }

    pub fn uses_post(self) -> bool {
        matches!(self, Placement::Post | Placement::Combined)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::parse("placement", format!("unknown placement {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoConfig {
    pub lambda_pre: f64,
    pub lambda_post: f64,
    pub beta: f64,
    /// Scheduler period in steps; 0 means one epoch.
    pub period_steps: usize,
    pub placement: Placement,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self {
            lambda_pre: 2e-3,
            lambda_post: 1.8e-2,
            beta: 3.0,
            period_steps: 0,
            placement: Placement::None,
        }
    }
}

impl TopoConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pre >= 0.0 && self.lambda_post >= 0.0) {
            return Err(Error::BadConfig("topological weights must be non-negative".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::BadConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if self.period_steps == 1 {
            return Err(Error::BadPeriod(1));
        }
        Ok(())
    }

    /// `λ₁`, or 0 when the placement does not use the latent space.
    pub fn effective_pre(&self) -> f64 {
        if self.placement.uses_pre() {
            self.lambda_pre
        } else {
            0.0
        }
    }

    pub fn effective_post(&self) -> f64 {
        if self.placement.uses_post() {
            self.lambda_post
        } else {
            0.0
        }
    }
}

/// Triangular wave: 0 at multiples of `period`, 1 half-way between.
pub fn cyclic_weight(step: u64, period: usize) -> Result<f64> {
    if period < 2 {
        return Err(Error::BadPeriod(period));
    }
    let phase = (step % period as u64) as f64 / period as f64;
    Ok(if phase <= 0.5 { 2.0 * phase } else { 2.0 - 2.0 * phase })
}

/// Deterministic perturbation of rows that exactly repeat an earlier row of
/// the same group; the offset is a constant, not a function of the weights.
#[derive(Debug, Clone, Copy)]
pub struct Jitter {
    pub scale: f64,
    pub seed: u64,
    pub step: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Jitter {
    fn apply(&self, points: &mut Matrix, space: u64, group: usize) {
        if self.scale == 0.0 {
            return;
        }
        for r in 1..points.rows() {
            let dup = (0..r).any(|q| {
                points.row(q).iter().zip(points.row(r)).all(|(a, b)| a.to_bits() == b.to_bits())
            });
            if !dup {
                continue;
            }
            let key = splitmix(splitmix(splitmix(self.seed ^ space) ^ self.step) ^ ((group as u64) << 32 | r as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            for v in points.row_mut(r) {
                *v += self.scale * rng.random_range(-1.0..=1.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Objective {
    pub task: f64,
    pub r_pre: f64,
    pub r_post: f64,
    pub sched_weight: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub objective: Objective,
    pub gradients: Gradients,
    /// Normalization statistics of this batch (robust mode only).
    pub batch_stats: Option<BatchStats>,
}

fn group_points(z: &Matrix, rows: &[Vec<usize>], jitter: &Jitter, space: u64) -> Vec<Matrix> {
    rows.iter()
        .enumerate()
        .map(|(g, r)| {
            let mut m = z.select_rows(r);
            jitter.apply(&mut m, space, g);
            m
        })
        .collect()
}

/// Densification loss over the class groups and, if `coef > 0`, add
/// `coef · ∂R/∂z` into `grad`.
fn densify_into(
    z: &Matrix,
    rows: &[Vec<usize>],
    beta: f64,
    coef: f64,
    jitter: &Jitter,
    space: u64,
    grad: &mut Matrix,
) -> Result<f64> {
    let groups = group_points(z, rows, jitter, space);
    let refs: Vec<&Matrix> = groups.iter().collect();
    let with_grad = coef > 0.0;
    let (loss, grads) = densification_on(&refs, beta, with_grad)?;
    if with_grad {
        for (g, r) in grads.iter().zip(rows) {
            for (local, &row) in r.iter().enumerate() {
                for (d, v) in grad.row_mut(row).iter_mut().zip(g.row(local)) {
                    *d += coef * v;
                }
            }
        }
    }
    Ok(loss)
}

/// Value and exact gradient of the composite objective on one batch.
pub fn composite_objective(
    weights: &MLPWeights,
    batch: &TrainBatch,
    anchors: Option<&AnchorSet>,
    topo: &TopoConfig,
    sched_weight: f64,
    jitter: &Jitter,
) -> Result<ObjectiveEval> {
    let mode = weights.mode();
    let enc = weights.encode_with_cache(&batch.inputs)?;
    let z = enc.output();
    let source = StatsSource::Rows(&batch.standard_rows);
    let t = forward_transform(mode, z, anchors, source)?;
    let post = t.output();
    let head = weights.head_with_cache(post)?;
    let (task, dlogits) = softmax_cross_entropy(head.output(), &batch.labels)?;
    let (head_grads, mut d_post) = weights.backward_segment(&head, &dlogits)?;

    let mut objective = Objective {
        task,
        sched_weight,
        ..Objective::default()
    };
    if topo.placement.uses_post() {
        let coef = sched_weight * topo.lambda_post;
        objective.r_post = densify_into(post, &batch.class_rows, topo.beta, coef, jitter, 2, &mut d_post)?;
    }
    let mut d_z = backward_transform(&t, &d_post)?;
    if topo.placement.uses_pre() {
        let coef = sched_weight * topo.lambda_pre;
        objective.r_pre = densify_into(z, &batch.class_rows, topo.beta, coef, jitter, 1, &mut d_z)?;
    }
    let (enc_grads, _) = weights.backward_segment(&enc, &d_z)?;
    objective.total = task + sched_weight * (topo.effective_pre() * objective.r_pre + topo.effective_post() * objective.r_post);
    if !objective.total.is_finite() {
        return Err(Error::NumericalFailure(format!("objective is {}", objective.total)));
    }
    Ok(ObjectiveEval {
        objective,
        gradients: Gradients {
            layers: enc_grads.into_iter().chain(head_grads).collect(),
        },
        batch_stats: t.stats().cloned(),
    })
}

/// Log record of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: u64,
    pub objective: Objective,
    pub anchors_refreshed: bool,
    /// Reason the update was not applied.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: MLPWeights,
    pub anchors: Option<AnchorSet>,
    pub step: u64,
    pub skipped_steps: u64,
}

impl TrainState {
    pub fn new(weights: MLPWeights, anchors: Option<AnchorSet>) -> Self {
        Self {
            weights,
            anchors,
            step: 0,
            skipped_steps: 0,
        }
    }
}

fn blend(running: &BatchStats, batch: &BatchStats, momentum: f64) -> Result<BatchStats> {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(r, x)| momentum * r + (1.0 - momentum) * x).collect()
    };
    BatchStats::new(mix(&running.mean, &batch.mean), mix(&running.std, &batch.std))
}

/// One SGD step. Numerical failures skip the update and are reported in the
/// diagnostics; other errors propagate.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    topo: &TopoConfig,
    sched_weight: f64,
    cfg: &TrainConfig,
) -> Result<StepDiagnostics> {
    let jitter = Jitter {
        scale: cfg.jitter,
        seed: cfg.seed,
        step: state.step,
    };
    let step = state.step;
    state.step += 1;
    let eval = match composite_objective(&state.weights, batch, state.anchors.as_ref(), topo, sched_weight, &jitter) {
        Ok(e) => e,
        Err(e) if e.is_numerical() => {
            state.skipped_steps += 1;
            return Ok(StepDiagnostics {
                step,
                objective: Objective {
                    sched_weight,
                    ..Objective::default()
                },
                anchors_refreshed: false,
                skipped: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e),
    };
    let m = state.weights.latent_layer();
    for (i, (layer, g)) in state.weights.layers_mut().iter_mut().zip(&eval.gradients.layers).enumerate() {
        let rate = cfg.layer_rate(i, m);
        for (w, d) in layer.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
            *w -= rate * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= rate * d;
        }
    }
    if let Some(batch_stats) = eval.batch_stats {
        let next = match state.weights.running_stats() {
            Some(running) => blend(running, &batch_stats, cfg.stats_momentum)?,
            None => batch_stats,
        };
        state.weights.set_running_stats(Some(next))?;
    }
    Ok(StepDiagnostics {
        step,
        objective: eval.objective,
        anchors_refreshed: false,
        skipped: None,
    })
}

/// Encode the anchor samples with the current encoder.
pub fn encode_anchors(weights: &MLPWeights, dataset: &Dataset, indices: &[usize]) -> Result<AnchorSet> {
    let z = weights.encode(&dataset.inputs().select_rows(indices))?;
    AnchorSet::new(z, indices.iter().map(|&i| i as u64).collect())
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub weights: MLPWeights,
    /// Anchors encoded with the final weights.
    pub anchors: Option<AnchorSet>,
    pub log: Vec<StepDiagnostics>,
}

/// Train `init` on `dataset` with the `K + 1` loader.
pub fn fit(
    dataset: &Dataset,
    init: MLPWeights,
    anchor_indices: Option<&[usize]>,
    cfg: &TrainConfig,
    topo: &TopoConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    topo.validate()?;
    if init.mode() != cfg.mode {
        return Err(Error::BadConfig(format!(
            "network is {} but training mode is {}",
            init.mode(),
            cfg.mode
        )));
    }
    let anchor_indices = match (cfg.mode.is_relative(), anchor_indices) {
        (false, _) => None,
        (true, Some(a)) => Some(a),
        (true, None) => return Err(Error::BadConfig(format!("{} training needs anchors", cfg.mode))),
    };
    let mut loader = TopoLoader::new(dataset.labels(), cfg.batch_n, cfg.seed ^ 0x10ad)?;
    let steps_per_epoch = loader.epoch_len();
    let period = match topo.period_steps {
        0 => steps_per_epoch.max(2),
        p => p,
    };
    let total = cfg.epochs * steps_per_epoch;
    let mut state = TrainState::new(init, None);
    let mut log = Vec::with_capacity(total);
    for step in 0..total as u64 {
        let refresh = match anchor_indices {
            Some(idx) if step % cfg.anchor_refresh_steps as u64 == 0 => {
                state.anchors = Some(encode_anchors(&state.weights, dataset, idx)?);
                true
            }
            _ => false,
        };
        let batch = loader.next_batch().gather(dataset);
        let sched = cyclic_weight(step, period)?;
        let mut diag = train_step(&mut state, &batch, topo, sched, cfg)?;
        diag.anchors_refreshed = refresh;
        log.push(diag);
    }
    if total > 0 && 2 * state.skipped_steps > total as u64 {
        let reason = log.iter().rev().find_map(|d| d.skipped.clone()).unwrap_or_default();
        return Err(Error::NumericalFailure(format!(
            "{} of {total} steps skipped; last: {reason}",
            state.skipped_steps
        )));
    }
    let anchors = match anchor_indices {
        Some(idx) => Some(encode_anchors(&state.weights, dataset, idx)?),
        None => None,
    };
    Ok(FitOutput {
        weights: state.weights,
        anchors,
        log,
    })
}

pub fn log_to_csv(log: &[StepDiagnostics]) -> String {
    use crate::io::format_f64;
    let mut out = String::from("step,task_loss,r_pre,r_post,sched_weight,total_loss,anchor_refresh,skipped\n");
    for d in log {
        let o = &d.objective;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            d.step,
            format_f64(o.task),
            format_f64(o.r_pre),
            format_f64(o.r_post),
            format_f64(o.sched_weight),
            format_f64(o.total),
            d.anchors_refreshed as u8,
            d.skipped.is_some() as u8
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::build_topo_batch;
    use crate::batching::partition_by_class;
    use crate::model::MlpBuilder;
    use crate::symmetry::Activation;
    use rand_distr::{Distribution, StandardNormal};

    fn toy(seed: u64, per_class: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 3.0], [-2.6, -1.5], [2.6, -1.5]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                for v in center {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    data.push(v + 0.5 * e);
                }
                labels.push(c);
            }
        }
        Dataset::new(Matrix::from_vec(labels.len(), 2, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn cyclic_weight_examples() {
        assert_eq!(cyclic_weight(0, 10).unwrap(), 0.0);
        assert_eq!(cyclic_weight(5, 10).unwrap(), 1.0);
        assert_eq!(cyclic_weight(10, 10).unwrap(), 0.0);
        assert_eq!(cyclic_weight(3, 8).unwrap(), 0.75);
        for s in 0..70 {
            let w = cyclic_weight(s, 7).unwrap();
            assert_eq!(w, cyclic_weight(s + 7, 7).unwrap());
            assert!((0.0..=1.0).contains(&w));
        }
        assert!(matches!(cyclic_weight(0, 1), Err(Error::BadPeriod(1))));
    }

    #[test]
    fn layer_rates_decay_from_latent() {
        let cfg = TrainConfig {
            learning_rate_encoder: 1.0,
            learning_rate_head: 0.5,
            layerwise_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.layer_rate(2, 3), 1.0);
        assert_eq!(cfg.layer_rate(0, 3), 0.25);
        assert_eq!(cfg.layer_rate(3, 3), 0.5);
        assert!(TrainConfig { layerwise_decay: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate_head: 0.0, ..cfg }.validate().is_err());
    }

    fn batch_for(ds: &Dataset, seed: u64, n: usize) -> TrainBatch {
        let p = partition_by_class(ds.labels()).unwrap();
        build_topo_batch(&p, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().gather(ds)
    }

    #[test]
    fn zero_lambdas_reduce_to_plain_cross_entropy() {
        let ds = toy(1, 20);
        let batch = batch_for(&ds, 2, 4);
        let w = MlpBuilder::new(&[2, 16, 16, 3], Activation::Relu).seed(3).build().unwrap();
        let topo = TopoConfig {
            lambda_pre: 0.0,
            lambda_post: 0.0,
            placement: Placement::Combined,
            ..TopoConfig::default()
        };
        let cfg = TrainConfig { mode: Mode::Absolute, ..TrainConfig::default() };
        let mut a = TrainState::new(w.clone(), None);
        train_step(&mut a, &batch, &topo, 1.0, &cfg).unwrap();
        let mut b = TrainState::new(w.clone(), None);
        let (logits, cache) = w.forward(&batch.inputs).unwrap();
        let (_, dl) = softmax_cross_entropy(&logits, &batch.labels).unwrap();
        let g = w.backward(&cache, &dl, None).unwrap();
        for (i, (layer, lg)) in b.weights.layers_mut().iter_mut().zip(&g.layers).enumerate() {
            let rate = cfg.layer_rate(i, 2);
            for (p, d) in layer.weight.as_mut_slice().iter_mut().zip(lg.weight.as_slice()) {
                *p -= rate * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&lg.bias) {
                *p -= rate * d;
            }
        }
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn placement_zeroes_unused_term() {
        let ds = toy(1, 20);
        let batch = batch_for(&ds, 2, 4);
        let w = MlpBuilder::new(&[2, 16, 16, 3], Activation::Gelu).mode(Mode::RelativeRobust, Some(6)).seed(3).build().unwrap();
        let anchors = encode_anchors(&w, &ds, &[0, 5, 21, 30, 44, 59]).unwrap();
        let topo = TopoConfig {
            placement: Placement::Pre,
            ..TopoConfig::default()
        };
        let jitter = Jitter { scale: 1e-9, seed: 0, step: 0 };
        let e = composite_objective(&w, &batch, Some(&anchors), &topo, 0.7, &jitter).unwrap();
        assert_eq!(e.objective.r_post, 0.0);
        assert!(e.objective.r_pre > 0.0);
        let expect = e.objective.task + 0.7 * 2e-3 * e.objective.r_pre;
        assert_eq!(e.objective.total, expect);
    }

    #[test]
    fn duplicates_are_jittered_deterministically() {
        let mut m = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]).unwrap();
        let j = Jitter { scale: 1e-9, seed: 4, step: 7 };
        let mut m2 = m.clone();
        j.apply(&mut m, 1, 0);
        j.apply(&mut m2, 1, 0);
        assert_eq!(m, m2);
        assert_eq!(m.row(0), &[1.0, 2.0]);
        assert_ne!(m.row(1), &[1.0, 2.0]);
        assert!((m[(1, 0)] - 1.0).abs() <= 1e-9);
        assert_eq!(m.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn composite_loss_decreases_on_toy_problem() {
        let ds = toy(5, 30);
        let cfg = TrainConfig {
            mode: Mode::Absolute,
            learning_rate_encoder: 0.1,
            learning_rate_head: 0.1,
            batch_n: 8,
            ..TrainConfig::default()
        };
        let topo = TopoConfig {
            placement: Placement::Pre,
            beta: 0.5,
            lambda_pre: 0.05,
            ..TopoConfig::default()
        };
        let fixed = batch_for(&ds, 11, 8);
        let jitter = Jitter { scale: 1e-9, seed: 0, step: 0 };
        let w = MlpBuilder::new(&[2, 16, 16, 3], Activation::Relu).seed(1).build().unwrap();
        let before = composite_objective(&w, &fixed, None, &topo, 1.0, &jitter).unwrap().objective.total;
        let mut state = TrainState::new(w, None);
        let mut loader = TopoLoader::new(ds.labels(), 8, 2).unwrap();
        for _ in 0..50 {
            let b = loader.next_batch().gather(&ds);
            train_step(&mut state, &b, &topo, 1.0, &cfg).unwrap();
        }
        let after = composite_objective(&state.weights, &fixed, None, &topo, 1.0, &jitter).unwrap().objective.total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn fit_is_deterministic_and_learns() {
        let ds = toy(6, 40);
        let cfg = TrainConfig {
            mode: Mode::Absolute,
            epochs: 20,
            batch_n: 8,
            learning_rate_encoder: 0.1,
            learning_rate_head: 0.1,
            seed: 3,
            ..TrainConfig::default()
        };
        let init = MlpBuilder::new(&[2, 16, 16, 3], Activation::Relu).seed(2).build().unwrap();
        let a = fit(&ds, init.clone(), None, &cfg, &TopoConfig::none()).unwrap();
        let b = fit(&ds, init, None, &cfg, &TopoConfig::none()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.log.iter().all(|d| d.objective.r_pre == 0.0 && d.objective.r_post == 0.0));
        let logits = a.weights.predict(ds.inputs()).unwrap();
        let correct = (0..ds.len())
            .filter(|&r| {
                let row = logits.row(r);
                let best = (0..3).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
                best == ds.labels()[r]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.9);
    }

    #[test]
    fn robust_fit_tracks_running_stats_and_refreshes() {
        let ds = toy(7, 20);
        let cfg = TrainConfig {
            mode: Mode::RelativeRobust,
            epochs: 2,
            batch_n: 4,
            anchor_refresh_steps: 5,
            ..TrainConfig::default()
        };
        let init = MlpBuilder::new(&[2, 8, 6, 3], Activation::Sigmoid)
            .linear_latent(true)
            .mode(Mode::RelativeRobust, Some(4))
            .seed(1)
            .build()
            .unwrap();
        let out = fit(&ds, init, Some(&[0, 10, 25, 50]), &cfg, &TopoConfig::none()).unwrap();
        assert!(out.weights.running_stats().is_some());
        let refreshed: Vec<u64> = out.log.iter().filter(|d| d.anchors_refreshed).map(|d| d.step).collect();
        assert_eq!(refreshed, vec![0, 5, 10, 15, 20, 25]);
        assert_eq!(out.anchors.unwrap().ids(), &[0, 10, 25, 50]);
        let init = MlpBuilder::new(&[2, 8, 6, 3], Activation::Relu).seed(1).build().unwrap();
        assert!(matches!(fit(&ds, init, None, &cfg, &TopoConfig::none()), Err(Error::BadConfig(_))));
    }
}
