//! Flat `key = value` configuration with `#` comments. Keys are grouped by
//! prefix (`data.`, `train.`, `topo.`, `stitch.`); unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::stitching::{Domain, ExperimentConfig};

/// Every recognized key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.kind", "scaled_permutation | orthogonal_mix | independent_noise"),
    ("data.classes", "number of classes"),
    ("data.samples", "samples per domain"),
    ("data.dim", "input dimension"),
    ("data.separation", "class means are separation * e_c"),
    ("data.noise", "noise level of independent_noise"),
    ("data.alpha", "mixing weight of orthogonal_mix"),
    ("data.max_scale", "scaled_permutation scales lie in [1/max_scale, max_scale]"),
    ("data.test_fraction", "held-out fraction of each domain"),
    ("train.seed", "master seed; all randomness derives from it"),
    ("train.mode", "absolute | relative_vanilla | relative_robust"),
    ("train.domain", "domain trained by the train command: a | b"),
    ("train.activation", "relu | gelu | sigmoid | identity"),
    ("train.hidden", "comma-separated hidden widths before the latent layer"),
    ("train.latent_dim", "latent width m"),
    ("train.linear_latent", "latent layer without activation: true | false"),
    ("train.anchors", "anchor count k; 0 means the latent width"),
    ("train.epochs", "training epochs"),
    ("train.lr_encoder", "learning rate of the latent layer"),
    ("train.lr_head", "learning rate of the head"),
    ("train.layerwise_decay", "per-layer rate decay away from the latent"),
    ("train.batch_n", "samples per sub-batch"),
    ("train.anchor_refresh_steps", "re-encode anchors every this many steps"),
    ("train.stats_momentum", "weight of the old running statistics"),
    ("train.jitter", "offset applied to duplicated rows before persistence"),
    ("topo.placement", "none | pre | post | combined"),
    ("topo.lambda_pre", "weight of the pre-relative densification loss"),
    ("topo.lambda_post", "weight of the post-relative densification loss"),
    ("topo.beta", "target death time"),
    ("topo.period_steps", "cyclic schedule period in steps; 0 means one epoch"),
    ("stitch.modes", "comma-separated modes evaluated by experiment"),
    ("stitch.runs", "seeded runs per mode"),
    ("stitch.eval_stats", "robust evaluation statistics: running | eval_set"),
    ("stitch.f1", "F1 averaging: macro | micro"),
    ("stitch.histogram_bins", "bins of the death-time histograms"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub domain: Domain,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            domain: Domain::A,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::BadConfig(format!("{key} = {value}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn get(&self, key: &str) -> Result<String> {
        let e = &self.experiment;
        Ok(match key {
            "data.kind" => e.data.kind.to_string(),
            "data.classes" => e.data.classes.to_string(),
            "data.samples" => e.data.samples.to_string(),
            "data.dim" => e.data.dim.to_string(),
            "data.separation" => e.data.separation.to_string(),
            "data.noise" => e.data.noise.to_string(),
            "data.alpha" => e.data.alpha.to_string(),
            "data.max_scale" => e.data.max_scale.to_string(),
            "data.test_fraction" => e.test_fraction.to_string(),
            "train.seed" => e.train.seed.to_string(),
            "train.mode" => e.train.mode.to_string(),
            "train.domain" => self.domain.name().to_string(),
            "train.activation" => e.arch.activation.to_string(),
            "train.hidden" => join(&e.arch.hidden),
            "train.latent_dim" => e.arch.latent_dim.to_string(),
            "train.linear_latent" => e.arch.linear_latent.to_string(),
            "train.anchors" => e.arch.anchors.to_string(),
            "train.epochs" => e.train.epochs.to_string(),
            "train.lr_encoder" => e.train.learning_rate_encoder.to_string(),
            "train.lr_head" => e.train.learning_rate_head.to_string(),
            "train.layerwise_decay" => e.train.layerwise_decay.to_string(),
            "train.batch_n" => e.train.batch_n.to_string(),
            "train.anchor_refresh_steps" => e.train.anchor_refresh_steps.to_string(),
            "train.stats_momentum" => e.train.stats_momentum.to_string(),
            "train.jitter" => e.train.jitter.to_string(),
            "topo.placement" => e.topo.placement.to_string(),
            "topo.lambda_pre" => e.topo.lambda_pre.to_string(),
            "topo.lambda_post" => e.topo.lambda_post.to_string(),
            "topo.beta" => e.topo.beta.to_string(),
            "topo.period_steps" => e.topo.period_steps.to_string(),
            "stitch.modes" => join(&e.modes),
            "stitch.runs" => e.runs.to_string(),
            "stitch.eval_stats" => e.eval_stats.name().to_string(),
            "stitch.f1" => e.f1.name().to_string(),
            "stitch.histogram_bins" => e.histogram_bins.to_string(),
            _ => return Err(Error::BadConfig(format!("unknown key '{key}'"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.experiment;
        match key {
            "data.kind" => e.data.kind = parse(key, v)?,
            "data.classes" => e.data.classes = parse(key, v)?,
            "data.samples" => e.data.samples = parse(key, v)?,
            "data.dim" => e.data.dim = parse(key, v)?,
            "data.separation" => e.data.separation = parse(key, v)?,
            "data.noise" => e.data.noise = parse(key, v)?,
            "data.alpha" => e.data.alpha = parse(key, v)?,
            "data.max_scale" => e.data.max_scale = parse(key, v)?,
            "data.test_fraction" => e.test_fraction = parse(key, v)?,
            "train.seed" => e.train.seed = parse(key, v)?,
            "train.mode" => e.train.mode = parse(key, v)?,
            "train.domain" => self.domain = parse(key, v)?,
            "train.activation" => e.arch.activation = parse(key, v)?,
            "train.hidden" => e.arch.hidden = parse_list(key, v)?,
            "train.latent_dim" => e.arch.latent_dim = parse(key, v)?,
            "train.linear_latent" => e.arch.linear_latent = parse(key, v)?,
            "train.anchors" => e.arch.anchors = parse(key, v)?,
            "train.epochs" => e.train.epochs = parse(key, v)?,
            "train.lr_encoder" => e.train.learning_rate_encoder = parse(key, v)?,
            "train.lr_head" => e.train.learning_rate_head = parse(key, v)?,
            "train.layerwise_decay" => e.train.layerwise_decay = parse(key, v)?,
            "train.batch_n" => e.train.batch_n = parse(key, v)?,
            "train.anchor_refresh_steps" => e.train.anchor_refresh_steps = parse(key, v)?,
            "train.stats_momentum" => e.train.stats_momentum = parse(key, v)?,
            "train.jitter" => e.train.jitter = parse(key, v)?,
            "topo.placement" => e.topo.placement = parse(key, v)?,
            "topo.lambda_pre" => e.topo.lambda_pre = parse(key, v)?,
            "topo.lambda_post" => e.topo.lambda_post = parse(key, v)?,
            "topo.beta" => e.topo.beta = parse(key, v)?,
            "topo.period_steps" => e.topo.period_steps = parse(key, v)?,
            "stitch.modes" => e.modes = parse_list::<Mode>(key, v)?,
            "stitch.runs" => e.runs = parse(key, v)?,
            "stitch.eval_stats" => e.eval_stats = parse(key, v)?,
            "stitch.f1" => e.f1 = parse(key, v)?,
            "stitch.histogram_bins" => e.histogram_bins = parse(key, v)?,
            _ => return Err(Error::BadConfig(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, context: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("{context}:{}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::BadConfig(format!("{context}:{}: {}", no + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("--set expects key=value, got '{item}'")))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the file, then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.data.validate()?;
        e.train.validate()?;
        e.topo.validate()?;
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(Error::BadConfig(format!("data.test_fraction must be in (0, 1), got {}", e.test_fraction)));
        }
        if e.arch.latent_dim == 0 || e.arch.hidden.contains(&0) {
            return Err(Error::BadConfig("layer widths must be positive".into()));
        }
        if e.runs == 0 {
            return Err(Error::BadConfig("stitch.runs must be at least 1".into()));
        }
        if e.modes.is_empty() {
            return Err(Error::BadConfig("stitch.modes is empty".into()));
        }
        if e.histogram_bins == 0 {
            return Err(Error::BadConfig("stitch.histogram_bins must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in documentation order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("documented key"));
        }
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::BadConfig(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let defaults = Config::default();
    let mut out = String::from("Config keys (key = default: description):\n");
    for (k, doc) in KEYS {
        let _ = writeln!(out, "  {k} = {}: {doc}", defaults.get(k).expect("documented key"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::Placement;

    #[test]
    fn every_key_round_trips() {
        let d = Config::default();
        for (k, _) in KEYS {
            let mut c = Config::default();
            c.set(k, &d.get(k).unwrap()).unwrap();
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn resolved_text_reloads_identically() {
        let mut c = Config::default();
        c.apply_override("train.hidden=16,8").unwrap();
        c.apply_override("stitch.modes = absolute,relative_robust").unwrap();
        c.apply_override("topo.placement=combined").unwrap();
        let mut back = Config::default();
        back.apply_text(&c.resolved(), "resolved").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.experiment.arch.hidden, vec![16, 8]);
        assert_eq!(back.experiment.topo.placement, Placement::Combined);
    }

    #[test]
    fn comments_overrides_and_unknown_keys() {
        let mut c = Config::default();
        c.apply_text("# header\n\ntrain.seed = 7 # trailing\n", "t").unwrap();
        assert_eq!(c.experiment.train.seed, 7);
        let err = c.apply_text("train.sede = 1\n", "t").unwrap_err();
        assert!(err.to_string().contains("unknown key 'train.sede'"));
        assert!(c.apply_text("train.seed 1\n", "t").is_err());
        assert!(c.apply_override("train.epochs=many").is_err());
        assert!(c.apply_override("train.domain=c").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(Config::load(None, &["data.test_fraction=1.5".into()]).is_err());
        assert!(Config::load(None, &["stitch.runs=0".into()]).is_err());
        assert!(Config::load(None, &["data.classes=1".into()]).is_err());
        assert!(Config::load(None, &[]).is_ok());
    }

    #[test]
    fn help_lists_all_keys() {
        let h = keys_help();
        for (k, _) in KEYS {
            assert!(h.contains(k));
        }
        assert!(h.contains("train.seed = 0"));
    }
}
