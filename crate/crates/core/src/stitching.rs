//! Paired synthetic domains, anchor correspondence, zero-shot stitching and
//! the stitching experiment grid.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batching::{partition_by_class, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{batch_stats_of, AnchorSet, LatentBatch, ScaledPermutation};
use crate::io::{format_f64, write_atomic};
use crate::linalg::{random_orthogonal, Matrix};
use crate::model::train::{encode_anchors, fit, log_to_csv, FitOutput, TopoConfig, TrainConfig};
use crate::model::transform::{forward_transform, StatsSource};
use crate::model::{save_weights, MLPWeights, MlpBuilder, Mode};
use crate::symmetry::Activation;
use crate::topology::{death_times, histogram, summarize};

/// Independent seed for a named random stream.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut x = seed;
    for &s in stream {
        x ^= s.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    ScaledPermutation,
    OrthogonalMix,
    IndependentNoise,
}

impl DataKind {
    pub const ALL: [DataKind; 3] = [DataKind::ScaledPermutation, DataKind::OrthogonalMix, DataKind::IndependentNoise];

    pub fn name(self) -> &'static str {
        match self {
            DataKind::ScaledPermutation => "scaled_permutation",
            DataKind::OrthogonalMix => "orthogonal_mix",
            DataKind::IndependentNoise => "independent_noise",
        }
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::parse("data.kind", format!("unknown kind {s:?}")))
    }
}

/// The hidden map from domain A inputs to domain B inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `x ↦ D·P·x + h`.
    ScaledPermutation(ScaledPermutation),
    /// `x ↦ α·U·x + (1 − α)·x`.
    OrthogonalMix { u: Matrix, alpha: f64 },
    /// `x ↦ x + σ·ε` with `ε` drawn from `seed`.
    IndependentNoise { sigma: f64, seed: u64 },
}

fn floats_line(values: &[f64]) -> String {
    values.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(" ")
}

fn parse_list<T: FromStr>(text: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    text.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|e| Error::parse("manifest", format!("{key}: {e}"))))
        .collect()
}

impl Generator {
    pub fn kind(&self) -> DataKind {
        match self {
            Generator::ScaledPermutation(_) => DataKind::ScaledPermutation,
            Generator::OrthogonalMix { .. } => DataKind::OrthogonalMix,
            Generator::IndependentNoise { .. } => DataKind::IndependentNoise,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Generator::ScaledPermutation(g) => g.apply_rows(x),
            Generator::OrthogonalMix { u, alpha } => {
                let rotated = x.matmul_transposed(u)?;
                Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    alpha * rotated[(r, c)] + (1.0 - alpha) * x[(r, c)]
                }))
            }
            Generator::IndependentNoise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let noise = Matrix::random_normal(x.rows(), x.cols(), &mut rng);
                Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] + sigma * noise[(r, c)]))
            }
        }
    }

    /// `key = value` lines fully describing the generator.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("generator = {}\n", self.kind());
        match self {
            Generator::ScaledPermutation(g) => {
                let perm: Vec<String> = g.perm().iter().map(|p| p.to_string()).collect();
                let _ = writeln!(out, "perm = {}", perm.join(" "));
                let _ = writeln!(out, "scale = {}", floats_line(g.scale()));
                let _ = writeln!(out, "shift = {}", floats_line(g.shift()));
            }
            Generator::OrthogonalMix { u, alpha } => {
                let _ = writeln!(out, "alpha = {}", format_f64(*alpha));
                let _ = writeln!(out, "u_dim = {}", u.rows());
                let _ = writeln!(out, "u = {}", floats_line(u.as_slice()));
            }
            Generator::IndependentNoise { sigma, seed } => {
                let _ = writeln!(out, "sigma = {}", format_f64(*sigma));
                let _ = writeln!(out, "noise_seed = {seed}");
            }
        }
        out
    }

    /// Parse the generator lines of a manifest; other keys are ignored.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::parse("manifest", format!("missing key {k}")))
        };
        let scalar = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|e| Error::parse("manifest", format!("{k}: {e}")))
        };
        match get("generator")?.parse::<DataKind>()? {
            DataKind::ScaledPermutation => Ok(Generator::ScaledPermutation(ScaledPermutation::new(
                parse_list(get("perm")?, "perm")?,
                parse_list(get("scale")?, "scale")?,
                parse_list(get("shift")?, "shift")?,
            )?)),
            DataKind::OrthogonalMix => {
                let n: usize = get("u_dim")?
                    .parse()
                    .map_err(|e| Error::parse("manifest", format!("u_dim: {e}")))?;
                Ok(Generator::OrthogonalMix {
                    u: Matrix::from_vec(n, n, parse_list(get("u")?, "u")?)?,
                    alpha: scalar("alpha")?,
                })
            }
            DataKind::IndependentNoise => Ok(Generator::IndependentNoise {
                sigma: scalar("sigma")?,
                seed: get("noise_seed")?
                    .parse()
                    .map_err(|e| Error::parse("manifest", format!("noise_seed: {e}")))?,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    /// Class means are `separation · e_c`.
    pub separation: f64,
    /// Noise level of `independent_noise`.
    pub noise: f64,
    /// Mixing weight of `orthogonal_mix`.
    pub alpha: f64,
    /// Scales of `scaled_permutation` are log-uniform in `[1/max_scale, max_scale]`.
    pub max_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::ScaledPermutation,
            classes: 2,
            samples: 2000,
            dim: 8,
            separation: 2.5,
            noise: 0.5,
            alpha: 1.0,
            max_scale: 3.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim < 2 || self.dim < self.classes {
            return bad(format!("dim {} must be at least 2 and at least the class count", self.dim));
        }
        if self.samples < 2 * self.classes {
            return bad(format!("{} samples is too few for {} classes", self.samples, self.classes));
        }
        if !(self.max_scale >= 1.0 && self.max_scale.is_finite()) {
            return bad(format!("max_scale must be at least 1, got {}", self.max_scale));
        }
        if !(self.noise >= 0.0 && self.separation.is_finite() && self.alpha.is_finite()) {
            return bad("noise must be non-negative and parameters finite".into());
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<Generator> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[2]));
        Ok(match self.kind {
            DataKind::ScaledPermutation => Generator::ScaledPermutation(ScaledPermutation::random(
                self.dim,
                1.0 / self.max_scale,
                self.max_scale,
                false,
                true,
                &mut rng,
            )),
            DataKind::OrthogonalMix => Generator::OrthogonalMix {
                u: random_orthogonal(self.dim, &mut rng),
                alpha: self.alpha,
            },
            DataKind::IndependentNoise => Generator::IndependentNoise {
                sigma: self.noise,
                seed: derive_seed(self.seed, &[3]),
            },
        })
    }
}

/// Index-aligned datasets with identical labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub a: Dataset,
    pub b: Dataset,
    pub generator: Generator,
}

impl DomainPair {
    pub fn new(a: Dataset, b: Dataset, generator: Generator) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        if a.labels() != b.labels() {
            return Err(Error::BadConfig("paired domains must share labels".into()));
        }
        Ok(Self { a, b, generator })
    }

    pub fn domain(&self, d: Domain) -> &Dataset {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }

    /// Aligned train/test split; `fraction` of the samples go to the test side.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(DomainPair, DomainPair)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::BadConfig(format!("test fraction {fraction} outside (0, 1)")));
        }
        let n = self.a.len();
        let n_test = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = order.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        let part = |idx: &[usize]| DomainPair {
            a: self.a.subset(idx),
            b: self.b.subset(idx),
            generator: self.generator.clone(),
        };
        Ok((part(&train), part(&test)))
    }
}

/// Gaussian mixture in domain A and its image under the hidden generator.
pub fn generate_domain_pair(cfg: &GenConfig) -> Result<DomainPair> {
    let generator = cfg.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let labels: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.classes).collect();
    let inputs = Matrix::from_fn(cfg.samples, cfg.dim, |r, c| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let mean = if c == labels[r] { cfg.separation } else { 0.0 };
        mean + e
    });
    let b_inputs = generator.apply(&inputs)?;
    let a = Dataset::new(inputs, labels.clone())?;
    let b = Dataset::new(b_inputs, labels)?;
    DomainPair::new(a, b, generator)
}

/// `k` distinct indices drawn uniformly from `0..n`.
pub fn select_anchor_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n || k == 0 {
        return Err(Error::NotEnoughSamples {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, k).into_vec())
}

/// Anchors as encodings of `k` seeded samples; ids are the sample indices.
pub fn select_anchors(encoder: &MLPWeights, dataset: &Dataset, k: usize, seed: u64) -> Result<AnchorSet> {
    let indices = select_anchor_indices(dataset.len(), k, seed)?;
    encode_anchors(encoder, dataset, &indices)
}

/// The same anchor samples taken from the paired domain.
pub fn paired_anchors(encoder: &MLPWeights, paired: &Dataset, anchors: &AnchorSet) -> Result<AnchorSet> {
    let indices: Vec<usize> = anchors.ids().iter().map(|&i| i as usize).collect();
    if let Some(&bad) = indices.iter().find(|&&i| i >= paired.len()) {
        return Err(Error::NotEnoughSamples {
            requested: bad + 1,
            available: paired.len(),
        });
    }
    encode_anchors(encoder, paired, &indices)
}

/// Network shape below and above the latent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub activation: Activation,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub linear_latent: bool,
    /// Anchor count; 0 means the latent width.
    pub anchors: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            hidden: vec![32],
            latent_dim: 16,
            linear_latent: true,
            anchors: 0,
        }
    }
}

impl Architecture {
    pub fn anchor_count(&self) -> usize {
        if self.anchors == 0 {
            self.latent_dim
        } else {
            self.anchors
        }
    }

    pub fn build(&self, mode: Mode, input_dim: usize, classes: usize, seed: u64) -> Result<MLPWeights> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.latent_dim);
        sizes.push(classes);
        MlpBuilder::new(&sizes, self.activation)
            .latent_layer(self.hidden.len() + 1)
            .linear_latent(self.linear_latent)
            .mode(mode, mode.is_relative().then_some(self.anchor_count()))
            .seed(seed)
            .build()
    }
}

/// Fresh network for `domain`, trained with `cfg.mode`.
pub fn train_domain_model(
    domain: &Dataset,
    arch: &Architecture,
    classes: usize,
    cfg: &TrainConfig,
    topo: &TopoConfig,
    anchor_indices: Option<&[usize]>,
    init_seed: u64,
) -> Result<FitOutput> {
    if cfg.mode.is_relative() != anchor_indices.is_some() {
        return Err(Error::BadConfig(format!(
            "{} training {} anchors",
            cfg.mode,
            if cfg.mode.is_relative() { "needs" } else { "takes no" }
        )));
    }
    if let Some(idx) = anchor_indices {
        if idx.len() != arch.anchor_count() {
            return Err(Error::AnchorCountMismatch {
                expected: arch.anchor_count(),
                got: idx.len(),
            });
        }
    }
    let init = arch.build(cfg.mode, domain.dim(), classes, init_seed)?;
    fit(domain, init, anchor_indices, cfg, topo)
}

/// Normalization statistics used by robust stitching at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStats {
    /// The encoder's running estimates.
    Running,
    /// Statistics of the encoded evaluation set.
    EvalSet,
}

impl EvalStats {
    pub fn name(self) -> &'static str {
        match self {
            EvalStats::Running => "running",
            EvalStats::EvalSet => "eval_set",
        }
    }
}

impl FromStr for EvalStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(EvalStats::Running),
            "eval_set" => Ok(EvalStats::EvalSet),
            _ => Err(Error::parse("stitch.eval_stats", format!("unknown value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Average {
    Macro,
    Micro,
}

impl F1Average {
    pub fn name(self) -> &'static str {
        match self {
            F1Average::Macro => "macro",
            F1Average::Micro => "micro",
        }
    }
}

impl FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(F1Average::Macro),
            "micro" => Ok(F1Average::Micro),
            _ => Err(Error::parse("stitch.f1", format!("unknown value {s:?}"))),
        }
    }
}

/// Scores multiplied by 100.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub acc: f64,
    pub f1: f64,
    pub mae: f64,
}

pub fn metrics(preds: &[usize], truth: &[usize], n_classes: usize, average: F1Average) -> Result<Metrics> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&label) = preds.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: n_classes,
        });
    }
    let n = preds.len() as f64;
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let mae = preds.iter().zip(truth).map(|(&p, &t)| p.abs_diff(t) as f64).sum::<f64>() / n;
    let mut tp = vec![0.0; n_classes];
    let mut fp = vec![0.0; n_classes];
    let mut fn_ = vec![0.0; n_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p == t {
            tp[p] += 1.0;
        } else {
            fp[p] += 1.0;
            fn_[t] += 1.0;
        }
    }
    let f1_of = |tp: f64, fp: f64, fn_: f64| {
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    };
    let f1 = match average {
        F1Average::Macro => (0..n_classes).map(|c| f1_of(tp[c], fp[c], fn_[c])).sum::<f64>() / n_classes as f64,
        F1Average::Micro => f1_of(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum()),
    };
    Ok(Metrics {
        acc: 100.0 * correct / n,
        f1: 100.0 * f1,
        mae: 100.0 * mae,
    })
}

pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `head(T(encoder(x)))` with the encoder side's anchors and statistics.
pub fn stitched_logits(
    encoder: &MLPWeights,
    head: &MLPWeights,
    anchors: Option<&AnchorSet>,
    x: &Matrix,
    stats: EvalStats,
) -> Result<Matrix> {
    if encoder.mode() != head.mode() {
        return Err(Error::ModeMismatch {
            encoder: encoder.mode().to_string(),
            head: head.mode().to_string(),
        });
    }
    let mode = encoder.mode();
    if mode.is_relative() {
        let got = anchors.map_or(0, AnchorSet::len);
        if got != head.head_input_dim() {
            return Err(Error::AnchorCountMismatch {
                expected: head.head_input_dim(),
                got,
            });
        }
    }
    let z = encoder.encode(x)?;
    let eval_stats;
    let source = match (mode, stats) {
        (Mode::RelativeRobust, EvalStats::Running) => StatsSource::Fixed(encoder.running_stats().ok_or_else(|| {
            Error::ArchitectureMismatch("robust encoder has no running statistics".into())
        })?),
        (Mode::RelativeRobust, EvalStats::EvalSet) => {
            eval_stats = batch_stats_of(&z)?;
            StatsSource::Fixed(&eval_stats)
        }
        _ => StatsSource::Batch,
    };
    let t = forward_transform(mode, &z, anchors, source)?;
    head.head(t.output())
}

pub fn stitch_evaluate(
    encoder: &MLPWeights,
    head: &MLPWeights,
    anchors: Option<&AnchorSet>,
    eval: &Dataset,
    stats: EvalStats,
    average: F1Average,
) -> Result<Metrics> {
    let logits = stitched_logits(encoder, head, anchors, eval.inputs(), stats)?;
    metrics(&argmax_rows(&logits), eval.labels(), head.output_dim(), average)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    pub fn name(self) -> &'static str {
        match self {
            Domain::A => "a",
            Domain::B => "b",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::BOTH
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown domain '{s}', expected a or b")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub test_fraction: f64,
    pub arch: Architecture,
    /// `mode` is overridden per experiment mode; `seed` is the master seed.
    pub train: TrainConfig,
    pub topo: TopoConfig,
    pub modes: Vec<Mode>,
    pub runs: usize,
    pub eval_stats: EvalStats,
    pub f1: F1Average,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            test_fraction: 0.2,
            arch: Architecture::default(),
            train: TrainConfig::default(),
            topo: TopoConfig::default(),
            modes: Mode::ALL.to_vec(),
            runs: 5,
            eval_stats: EvalStats::Running,
            f1: F1Average::Macro,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let s = summarize(values).expect("at least one run");
    MeanStd { mean: s.mean, std: s.std }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub gamma: Domain,
    pub phi: Domain,
    pub acc: MeanStd,
    pub f1: MeanStd,
    pub mae: MeanStd,
}

/// Metrics of one seeded run, indexed `[gamma][phi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: Mode,
    pub run: usize,
    pub cells: [[Metrics; 2]; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchReport {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
}

impl StitchReport {
    fn from_runs(modes: &[Mode], runs: Vec<RunRecord>) -> Self {
        let mut rows = Vec::new();
        for &mode in modes {
            for gamma in Domain::BOTH {
                for phi in Domain::BOTH {
                    let cells: Vec<Metrics> = runs
                        .iter()
                        .filter(|r| r.mode == mode)
                        .map(|r| r.cells[gamma.index()][phi.index()])
                        .collect();
                    let pick = |f: fn(&Metrics) -> f64| mean_std(&cells.iter().map(f).collect::<Vec<_>>());
                    rows.push(ReportRow {
                        mode,
                        gamma,
                        phi,
                        acc: pick(|m| m.acc),
                        f1: pick(|m| m.f1),
                        mae: pick(|m| m.mae),
                    });
                }
            }
        }
        Self { rows, runs }
    }

    pub fn row(&self, mode: Mode, gamma: Domain, phi: Domain) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.gamma == gamma && r.phi == phi)
    }

    /// Mean accuracy over the off-diagonal cells.
    pub fn cross_domain_accuracy(&self, mode: Mode) -> Option<f64> {
        let ab = self.row(mode, Domain::A, Domain::B)?.acc.mean;
        let ba = self.row(mode, Domain::B, Domain::A)?.acc.mean;
        Some((ab + ba) / 2.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,gamma_domain,phi_domain,acc_mean,acc_std,f1_mean,f1_std,mae_mean,mae_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.mode,
                r.gamma.name(),
                r.phi.name(),
                r.acc.mean,
                r.acc.std,
                r.f1.mean,
                r.f1.std,
                r.mae.mean,
                r.mae.std
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Pre,
    Post,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Pre => "pre",
            Space::Post => "post",
        }
    }
}

/// Within-class death times pooled over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeathRecord {
    pub mode: Mode,
    pub domain: Domain,
    pub space: Space,
    pub deaths: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub mode: Mode,
    pub domain: Domain,
    pub run: usize,
    pub fit: FitOutput,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: StitchReport,
    pub deaths: Vec<DeathRecord>,
    pub models: Vec<TrainedModel>,
}

/// Latent and transformed test points for the death-time analysis.
fn spaces(model: &MLPWeights, anchors: Option<&AnchorSet>, x: &Matrix, stats: EvalStats) -> Result<(Matrix, Matrix)> {
    let z = model.encode(x)?;
    let post = match model.mode() {
        Mode::Absolute => z.clone(),
        _ => {
            let eval_stats;
            let source = match (model.mode(), stats) {
                (Mode::RelativeRobust, EvalStats::Running) => StatsSource::Fixed(
                    model.running_stats().ok_or_else(|| Error::ArchitectureMismatch("no running statistics".into()))?,
                ),
                (Mode::RelativeRobust, EvalStats::EvalSet) => {
                    eval_stats = batch_stats_of(&z)?;
                    StatsSource::Fixed(&eval_stats)
                }
                _ => StatsSource::Batch,
            };
            forward_transform(model.mode(), &z, anchors, source)?.output().clone()
        }
    };
    Ok((z, post))
}

/// Death times of disjoint same-class chunks of size `n`.
pub fn chunked_death_times(points: &Matrix, labels: &[usize], n: usize, seed: u64) -> Result<Vec<f64>> {
    let partition = partition_by_class(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in partition.classes() {
        let mut idx = class.clone();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(n).filter(|c| c.len() == n) {
            let batch = LatentBatch::new(points.select_rows(chunk))?;
            out.extend_from_slice(death_times(&batch)?.deaths());
        }
    }
    Ok(out)
}

/// Data seed of the domain pair generated from master seed `seed`.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, &[10])
}

/// Train and test halves of the domain pair derived from the master seed.
pub fn experiment_data(cfg: &ExperimentConfig) -> Result<(DomainPair, DomainPair)> {
    let seed = cfg.train.seed;
    let pair = generate_domain_pair(&GenConfig {
        seed: data_seed(seed),
        ..cfg.data.clone()
    })?;
    pair.split(cfg.test_fraction, derive_seed(seed, &[11]))
}

/// Anchor sample indices of run `run`, shared by both domains.
pub fn run_anchor_indices(cfg: &ExperimentConfig, train_len: usize, run: usize) -> Result<Vec<usize>> {
    select_anchor_indices(train_len, cfg.arch.anchor_count(), derive_seed(cfg.train.seed, &[12, run as u64]))
}

/// Training config and init seed of `domain` in run `run`.
pub fn run_train_config(cfg: &ExperimentConfig, mode: Mode, domain: Domain, run: usize) -> (TrainConfig, u64) {
    let d = domain.index() as u64;
    let seed = cfg.train.seed;
    (
        TrainConfig {
            mode,
            seed: derive_seed(seed, &[13, run as u64, d]),
            ..cfg.train.clone()
        },
        derive_seed(seed, &[14, run as u64, d]),
    )
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.runs == 0 {
        return Err(Error::BadConfig("runs must be at least 1".into()));
    }
    if cfg.modes.is_empty() {
        return Err(Error::BadConfig("no modes selected".into()));
    }
    let seed = cfg.train.seed;
    let (train, test) = experiment_data(cfg)?;
    let classes = cfg.data.classes;
    let mut runs = Vec::new();
    let mut models = Vec::new();
    let mut deaths = Vec::new();
    for &mode in &cfg.modes {
        let mut pooled = vec![Vec::new(); 4];
        for run in 0..cfg.runs {
            let anchor_idx = run_anchor_indices(cfg, train.a.len(), run)?;
            let mut fits = Vec::with_capacity(2);
            for domain in Domain::BOTH {
                let (train_cfg, init_seed) = run_train_config(cfg, mode, domain, run);
                let fit = train_domain_model(
                    train.domain(domain),
                    &cfg.arch,
                    classes,
                    &train_cfg,
                    &cfg.topo,
                    mode.is_relative().then_some(anchor_idx.as_slice()),
                    init_seed,
                )?;
                fits.push(fit);
            }
            let mut cells = [[Metrics::default(); 2]; 2];
            for gamma in Domain::BOTH {
                for phi in Domain::BOTH {
                    let enc = &fits[phi.index()];
                    cells[gamma.index()][phi.index()] = stitch_evaluate(
                        &enc.weights,
                        &fits[gamma.index()].weights,
                        enc.anchors.as_ref(),
                        test.domain(phi),
                        cfg.eval_stats,
                        cfg.f1,
                    )?;
                }
            }
            runs.push(RunRecord { mode, run, cells });
            for domain in Domain::BOTH {
                let fit = &fits[domain.index()];
                let eval = test.domain(domain);
                let (pre, post) = spaces(&fit.weights, fit.anchors.as_ref(), eval.inputs(), cfg.eval_stats)?;
                let s = derive_seed(seed, &[15, run as u64, domain.index() as u64]);
                pooled[2 * domain.index()].extend(chunked_death_times(&pre, eval.labels(), cfg.train.batch_n, s)?);
                pooled[2 * domain.index() + 1].extend(chunked_death_times(&post, eval.labels(), cfg.train.batch_n, s)?);
            }
            for (domain, fit) in Domain::BOTH.into_iter().zip(fits) {
                models.push(TrainedModel { mode, domain, run, fit });
            }
        }
        for domain in Domain::BOTH {
            for (k, space) in [Space::Pre, Space::Post].into_iter().enumerate() {
                deaths.push(DeathRecord {
                    mode,
                    domain,
                    space,
                    deaths: std::mem::take(&mut pooled[2 * domain.index() + k]),
                });
            }
        }
    }
    Ok(ExperimentResult {
        report: StitchReport::from_runs(&cfg.modes, runs),
        deaths,
        models,
    })
}

fn histogram_csv(records: &[&DeathRecord], bins: usize) -> String {
    let hi = records
        .iter()
        .flat_map(|r| r.deaths.iter().cloned())
        .fold(0.0f64, f64::max);
    let mut out = String::from("mode,domain,bin,left,right,count\n");
    for r in records {
        for (i, b) in histogram(&r.deaths, bins, 0.0, if hi > 0.0 { hi } else { 1.0 }).iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{i},{},{},{}",
                r.mode,
                r.domain.name(),
                format_f64(b.left),
                format_f64(b.right),
                b.count
            );
        }
    }
    out
}

fn deaths_summary_csv(records: &[DeathRecord]) -> String {
    let mut out = String::from("mode,domain,space,count,mean,std,min,max\n");
    for r in records {
        let s = summarize(&r.deaths);
        let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), format_f64);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.domain.name(),
            r.space.name(),
            r.deaths.len(),
            f(s.map(|s| s.mean)),
            f(s.map(|s| s.std)),
            f(s.map(|s| s.min)),
            f(s.map(|s| s.max))
        );
    }
    out
}

/// Write every experiment artifact below `dir`. The report is written last.
pub fn write_experiment(result: &ExperimentResult, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    for m in &result.models {
        let sub = dir.join(m.mode.name());
        let tag = format!("{}_{}", m.domain.name(), m.run);
        write_atomic(&sub.join(format!("train_log_{tag}.csv")), log_to_csv(&m.fit.log).as_bytes())?;
        save_weights(&m.fit.weights, &sub.join(format!("model_{tag}.mlpw")))?;
        if let Some(a) = &m.fit.anchors {
            crate::io::write_anchors(&sub.join(format!("anchors_{tag}.csv")), a)?;
        }
    }
    for space in [Space::Pre, Space::Post] {
        let records: Vec<&DeathRecord> = result.deaths.iter().filter(|r| r.space == space).collect();
        write_atomic(
            &dir.join(format!("deaths_{}.csv", space.name())),
            histogram_csv(&records, cfg.histogram_bins).as_bytes(),
        )?;
    }
    write_atomic(&dir.join("deaths_summary.csv"), deaths_summary_csv(&result.deaths).as_bytes())?;
    write_atomic(&dir.join("report.csv"), result.report.to_csv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::Placement;

    #[test]
    fn metric_examples() {
        let same = metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, F1Average::Macro).unwrap();
        assert_eq!((same.acc, same.f1, same.mae), (100.0, 100.0, 0.0));
        let m = metrics(&[0, 1, 2], &[0, 1, 4], 5, F1Average::Macro).unwrap();
        assert!((m.acc - 66.67).abs() < 0.01);
        assert!((m.mae - 66.67).abs() < 0.01);
        assert!((m.f1 - 40.0).abs() < 1e-12);
        let micro = metrics(&[0, 1, 2], &[0, 1, 4], 5, F1Average::Micro).unwrap();
        assert!((micro.f1 - m.acc).abs() < 1e-12);
        assert!(matches!(metrics(&[0], &[0, 1], 2, F1Average::Macro), Err(Error::LengthMismatch { .. })));
        assert!(matches!(metrics(&[2], &[0], 2, F1Average::Macro), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn identity_generators_copy_domain_a() {
        let base = GenConfig { samples: 60, ..GenConfig::default() };
        let pair = generate_domain_pair(&base).unwrap();
        let id = Generator::ScaledPermutation(ScaledPermutation::identity(base.dim));
        assert_eq!(id.apply(pair.a.inputs()).unwrap(), *pair.a.inputs());
        let mix = Generator::OrthogonalMix { u: Matrix::identity(base.dim), alpha: 1.0 };
        assert_eq!(mix.apply(pair.a.inputs()).unwrap(), *pair.a.inputs());
        assert_eq!(pair.a.labels(), pair.b.labels());
        assert_eq!(pair.b.inputs(), &pair.generator.apply(pair.a.inputs()).unwrap());
        assert!(generate_domain_pair(&GenConfig { classes: 1, ..base.clone() }).is_err());
        assert!(generate_domain_pair(&GenConfig { dim: 1, ..base }).is_err());
    }

    #[test]
    fn class_means_follow_the_generator() {
        let cfg = GenConfig { samples: 2000, seed: 4, ..GenConfig::default() };
        let pair = generate_domain_pair(&cfg).unwrap();
        let Generator::ScaledPermutation(g) = &pair.generator else { panic!() };
        for class in 0..cfg.classes {
            let rows: Vec<usize> = (0..cfg.samples).filter(|&i| pair.a.labels()[i] == class).collect();
            let n = rows.len() as f64;
            let mean_b = batch_stats_of(&pair.b.inputs().select_rows(&rows)).unwrap().mean;
            let true_mean: Vec<f64> = (0..cfg.dim).map(|c| if c == class { cfg.separation } else { 0.0 }).collect();
            let expect = g.apply(&true_mean).unwrap();
            for i in 0..cfg.dim {
                let sd = g.scale()[i].abs() / n.sqrt();
                assert!((mean_b[i] - expect[i]).abs() <= 3.0 * sd + 1e-12, "class {class} dim {i}");
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        for kind in DataKind::ALL {
            let cfg = GenConfig { kind, samples: 40, ..GenConfig::default() };
            let g = cfg.generator().unwrap();
            let back = Generator::from_manifest(&g.to_manifest()).unwrap();
            let pair = generate_domain_pair(&cfg).unwrap();
            let replay = back.apply(pair.a.inputs()).unwrap();
            assert!(replay.max_abs_diff(pair.b.inputs()) <= 1e-12, "{kind}");
        }
        assert!(Generator::from_manifest("generator = nope\n").is_err());
    }

    #[test]
    fn anchors_are_seeded_and_paired() {
        let pair = generate_domain_pair(&GenConfig { samples: 100, ..GenConfig::default() }).unwrap();
        assert_eq!(select_anchor_indices(100, 8, 3).unwrap(), select_anchor_indices(100, 8, 3).unwrap());
        assert!(select_anchor_indices(5, 6, 0).is_err());
        let arch = Architecture { latent_dim: 6, ..Architecture::default() };
        let wa = arch.build(Mode::RelativeRobust, 8, 2, 1).unwrap();
        let wb = arch.build(Mode::RelativeRobust, 8, 2, 2).unwrap();
        let a = select_anchors(&wa, &pair.a, 6, 5).unwrap();
        let b = paired_anchors(&wb, &pair.b, &a).unwrap();
        assert_eq!(a.ids(), b.ids());
        let refreshed = paired_anchors(&wa, &pair.a, &a).unwrap();
        assert_eq!(refreshed, a);
        let other = paired_anchors(&wb, &pair.a, &a).unwrap();
        assert_eq!(other.ids(), a.ids());
        assert_ne!(other.matrix(), a.matrix());
    }

    #[test]
    fn self_stitch_equals_in_domain_evaluation() {
        let pair = generate_domain_pair(&GenConfig { samples: 80, ..GenConfig::default() }).unwrap();
        let arch = Architecture { latent_dim: 6, hidden: vec![10], ..Architecture::default() };
        let cfg = TrainConfig { mode: Mode::RelativeRobust, epochs: 2, batch_n: 4, ..TrainConfig::default() };
        let idx = select_anchor_indices(80, 6, 1).unwrap();
        let fit = train_domain_model(&pair.a, &arch, 2, &cfg, &TopoConfig::none(), Some(&idx), 3).unwrap();
        assert_eq!(fit.weights.head_input_dim(), 6);
        let anchors = fit.anchors.as_ref().unwrap();
        let logits = stitched_logits(&fit.weights, &fit.weights, Some(anchors), pair.a.inputs(), EvalStats::Running).unwrap();
        let z = fit.weights.encode(pair.a.inputs()).unwrap();
        let direct = fit
            .weights
            .head(&crate::geometry::robust_relative_transform_batch(&z, anchors, fit.weights.running_stats().unwrap()).unwrap())
            .unwrap();
        assert_eq!(logits, direct);
        let absolute = train_domain_model(
            &pair.a,
            &arch,
            2,
            &TrainConfig { mode: Mode::Absolute, ..cfg.clone() },
            &TopoConfig::none(),
            None,
            3,
        )
        .unwrap();
        assert!(matches!(
            stitch_evaluate(&absolute.weights, &fit.weights, Some(anchors), &pair.a, EvalStats::Running, F1Average::Macro),
            Err(Error::ModeMismatch { .. })
        ));
        let few = AnchorSet::with_sequential_ids(anchors.matrix().select_rows(&[0, 1])).unwrap();
        assert!(matches!(
            stitch_evaluate(&fit.weights, &fit.weights, Some(&few), &pair.a, EvalStats::Running, F1Average::Macro),
            Err(Error::AnchorCountMismatch { .. })
        ));
        let abs_logits = stitched_logits(&absolute.weights, &absolute.weights, None, pair.a.inputs(), EvalStats::Running).unwrap();
        assert_eq!(abs_logits, absolute.weights.predict(pair.a.inputs()).unwrap());
    }

    #[test]
    fn tiny_experiment_runs_end_to_end() {
        let cfg = ExperimentConfig {
            data: GenConfig { samples: 200, ..GenConfig::default() },
            arch: Architecture { latent_dim: 6, hidden: vec![10], ..Architecture::default() },
            train: TrainConfig { epochs: 2, batch_n: 8, ..TrainConfig::default() },
            topo: TopoConfig { placement: Placement::Combined, ..TopoConfig::default() },
            runs: 1,
            ..ExperimentConfig::default()
        };
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.report.rows.len(), 12);
        for row in &result.report.rows {
            assert_eq!((row.acc.std, row.f1.std, row.mae.std), (0.0, 0.0, 0.0));
            assert!((0.0..=100.0).contains(&row.acc.mean) && row.mae.mean >= 0.0);
        }
        let dir = tempfile::tempdir().unwrap();
        write_experiment(&result, &cfg, dir.path()).unwrap();
        for f in ["report.csv", "deaths_pre.csv", "deaths_post.csv", "relative_robust/train_log_b_0.csv", "absolute/model_a_0.mlpw"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 13);
    }
}
