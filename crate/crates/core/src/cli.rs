//! Command-line surface. Exit codes: 0 success, 1 other failure, 2 config
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{keys_help, Config};
use crate::error::{Error, Result};
use crate::geometry::LatentBatch;
use crate::io::{format_f64, read_anchors, read_dataset, read_labels, read_latent, write_anchors, write_atomic, write_dataset};
use crate::model::{load_weights, save_weights};
use crate::model::train::log_to_csv;
use crate::stitching::{
    data_seed, experiment_data, generate_domain_pair, run_anchor_indices, run_experiment, run_train_config,
    stitch_evaluate, train_domain_model, write_experiment, DataKind, GenConfig, Generator,
};
use crate::topology::{death_times, densification_loss, histogram, summarize};
use crate::verify::{run_suite, Suite};

#[derive(Debug, Parser)]
#[command(name = "toporel", version, about = "Robust relative representations and zero-shot model stitching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a paired synthetic dataset and its generator manifest.
    GenData {
        #[arg(long, default_value = "scaled_permutation")]
        kind: String,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one domain model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an encoder from one model with the head of another.
    Stitch {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model providing the encoder.
        #[arg(long)]
        encoder: PathBuf,
        /// Model providing the head.
        #[arg(long)]
        head: PathBuf,
        /// Anchors of the encoder's domain (relative modes).
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Evaluation dataset of the encoder's domain.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every mode over all runs and write the stitching report.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Death-time histograms and per-class densification loss of embeddings.
    AnalyzeTopology {
        /// Latent CSV with a `dim=<m>` header.
        #[arg(long)]
        embeddings: PathBuf,
        /// Label CSV with a `label` header.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        beta: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::BadConfig(_)) {
        2
    } else {
        1
    }
}

fn command() -> clap::Command {
    let help = keys_help();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let help = help.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(help));
    }
    cmd
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(args: &ConfigArgs) -> Result<Config> {
    Config::load(args.config.as_deref(), &args.set)
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData {
            kind,
            classes,
            samples,
            dim,
            seed,
            out,
        } => {
            let cfg = GenConfig {
                kind: kind.parse::<DataKind>().map_err(|e| Error::BadConfig(e.to_string()))?,
                classes,
                samples,
                dim,
                seed: data_seed(seed),
                ..GenConfig::default()
            };
            gen_data(&cfg, seed, &out)?;
        }
        Command::Train { cfg, out } => train(&load(&cfg)?, &out)?,
        Command::Stitch {
            cfg,
            encoder,
            head,
            anchors,
            data,
            out,
        } => stitch(&load(&cfg)?, &encoder, &head, anchors.as_deref(), &data, out.as_deref())?,
        Command::Experiment { cfg, out } => experiment(&load(&cfg)?, &out)?,
        Command::AnalyzeTopology {
            embeddings,
            labels,
            beta,
            bins,
            out,
        } => analyze_topology(&embeddings, &labels, beta, bins, &out)?,
        Command::Verify { suite, seed } => return verify(suite.parse()?, seed),
    }
    Ok(0)
}

pub fn gen_data(cfg: &GenConfig, master_seed: u64, out: &Path) -> Result<()> {
    let pair = generate_domain_pair(cfg)?;
    write_dataset(&out.join("domain_a.csv"), &pair.a)?;
    write_dataset(&out.join("domain_b.csv"), &pair.b)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# toporel gen-data");
    let _ = writeln!(manifest, "kind = {}", cfg.kind);
    let _ = writeln!(manifest, "classes = {}", cfg.classes);
    let _ = writeln!(manifest, "samples = {}", cfg.samples);
    let _ = writeln!(manifest, "dim = {}", cfg.dim);
    let _ = writeln!(manifest, "seed = {master_seed}");
    manifest.push_str(&pair.generator.to_manifest());
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    println!("wrote {} samples per domain to {}", pair.a.len(), out.display());
    Ok(())
}

/// Read the generator recorded by `gen-data`.
pub fn read_manifest(path: &Path) -> Result<Generator> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Generator::from_manifest(&text)
}

pub fn train(cfg: &Config, out: &Path) -> Result<()> {
    let e = &cfg.experiment;
    let (train, test) = experiment_data(e)?;
    let mode = e.train.mode;
    let anchor_idx = run_anchor_indices(e, train.a.len(), 0)?;
    let (train_cfg, init_seed) = run_train_config(e, mode, cfg.domain, 0);
    let fit = train_domain_model(
        train.domain(cfg.domain),
        &e.arch,
        e.data.classes,
        &train_cfg,
        &e.topo,
        mode.is_relative().then_some(anchor_idx.as_slice()),
        init_seed,
    )?;
    write_atomic(&out.join("resolved_config.txt"), cfg.resolved().as_bytes())?;
    write_atomic(&out.join("train_log.csv"), log_to_csv(&fit.log).as_bytes())?;
    save_weights(&fit.weights, &out.join("model.mlpw"))?;
    if let Some(a) = &fit.anchors {
        write_anchors(&out.join("anchors.csv"), a)?;
    }
    write_dataset(&out.join("test.csv"), test.domain(cfg.domain))?;
    let skipped = fit.log.iter().filter(|s| s.skipped.is_some()).count();
    println!(
        "trained {mode} model on domain {} for {} steps ({skipped} skipped), wrote {}",
        cfg.domain.name(),
        fit.log.len(),
        out.display()
    );
    Ok(())
}

pub fn stitch(
    cfg: &Config,
    encoder: &Path,
    head: &Path,
    anchors: Option<&Path>,
    data: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let e = &cfg.experiment;
    let enc = load_weights(encoder)?;
    let hd = load_weights(head)?;
    let anchors = anchors.map(read_anchors).transpose()?;
    let eval = read_dataset(data)?;
    let m = stitch_evaluate(&enc, &hd, anchors.as_ref(), &eval, e.eval_stats, e.f1)?;
    let csv = format!(
        "acc,f1,mae\n{},{},{}\n",
        format_f64(m.acc),
        format_f64(m.f1),
        format_f64(m.mae)
    );
    println!("acc {:.2} f1 {:.2} mae {:.2}", m.acc, m.f1, m.mae);
    if let Some(dir) = out {
        write_atomic(&dir.join("resolved_config.txt"), cfg.resolved().as_bytes())?;
        write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
    }
    Ok(())
}

pub fn experiment(cfg: &Config, out: &Path) -> Result<()> {
    let e = &cfg.experiment;
    let result = run_experiment(e)?;
    write_atomic(&out.join("resolved_config.txt"), cfg.resolved().as_bytes())?;
    write_experiment(&result, e, out)?;
    print!("{}", result.report.to_csv());
    Ok(())
}

/// Per-class death times, histogram and loss at `beta`.
pub fn analyze_topology(embeddings: &Path, labels: &Path, beta: f64, bins: usize, out: &Path) -> Result<()> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::BadConfig(format!("beta must be finite and non-negative, got {beta}")));
    }
    if bins == 0 {
        return Err(Error::BadConfig("bins must be at least 1".into()));
    }
    let points = read_latent(embeddings)?;
    let labels = read_labels(labels)?;
    if labels.len() != points.len() {
        return Err(Error::LengthMismatch {
            left: points.len(),
            right: labels.len(),
        });
    }
    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for &c in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let batch = LatentBatch::new(points.matrix().select_rows(&rows))?;
        let deaths = if rows.len() >= 2 {
            death_times(&batch)?.deaths().to_vec()
        } else {
            Vec::new()
        };
        let loss = if rows.len() >= 2 {
            densification_loss(&[batch], beta)?
        } else {
            0.0
        };
        per_class.push((c, rows.len(), deaths, loss));
    }
    let hi = per_class
        .iter()
        .flat_map(|p| p.2.iter().cloned())
        .fold(0.0f64, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let mut hist = String::from("class,bin,left,right,count\n");
    let mut summary = String::from("class,size,deaths,mean,std,min,max,loss\n");
    let mut total = 0.0;
    for (c, size, deaths, loss) in &per_class {
        for (i, b) in histogram(deaths, bins, 0.0, hi).iter().enumerate() {
            let _ = writeln!(hist, "{c},{i},{},{},{}", format_f64(b.left), format_f64(b.right), b.count);
        }
        let s = summarize(deaths);
        let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), format_f64);
        let _ = writeln!(
            summary,
            "{c},{size},{},{},{},{},{},{}",
            deaths.len(),
            f(s.map(|s| s.mean)),
            f(s.map(|s| s.std)),
            f(s.map(|s| s.min)),
            f(s.map(|s| s.max)),
            format_f64(*loss)
        );
        println!("class {c}: {size} points, {} deaths, loss {loss}", deaths.len());
        total += loss;
    }
    println!("total loss {total}");
    write_atomic(&out.join("deaths_histogram.csv"), hist.as_bytes())?;
    write_atomic(&out.join("topology_summary.csv"), summary.as_bytes())
}

pub fn verify(suite: Suite, seed: u64) -> Result<i32> {
    let checks = run_suite(suite, seed)?;
    let mut failed = 0;
    for c in &checks {
        println!("{c}");
        if !c.passed() {
            failed += 1;
        }
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
