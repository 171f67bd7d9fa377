//! Acceptance criteria. Runs without the test harness so that every criterion
//! prints exactly one PASS/FAIL line, also under plain `cargo test`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use toporel::batching::{OriginalLoader, TopoLoader};
use toporel::model::train::Placement;
use toporel::model::Mode;
use toporel::stitching::{run_experiment, write_experiment, Domain, ExperimentConfig, ExperimentResult, Space};
use toporel::topology::summarize;
use toporel::verify::{self, Check};

const SEED: u64 = 0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[Check]) -> Outcome {
    Outcome {
        passed: checks.iter().all(Check::passed),
        detail: checks.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; "),
    }
}

fn within(outcome: Outcome, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    match limit {
        Some(l) if elapsed > l => Outcome {
            passed: false,
            detail: format!("{}; took {elapsed:.2?}, limit {l:?}", outcome.detail),
        },
        _ => outcome,
    }
}

fn robust_invariance() -> Outcome {
    from_checks(&[verify::robust_scaled_permutation_invariance(SEED, 100).unwrap()])
}

fn vanilla_contrast() -> Outcome {
    from_checks(&[
        verify::vanilla_orthogonal_isotropic_invariance(SEED, 100).unwrap(),
        verify::vanilla_anisotropic_counterexample().unwrap(),
        verify::robust_anisotropic_counterexample().unwrap(),
    ])
}

fn intertwiner_networks() -> Outcome {
    from_checks(&verify::network_invariance_checks(SEED, 20).unwrap())
}

fn persistence_oracle() -> Outcome {
    let (a, b) = verify::persistence_oracle_checks(SEED, 100).unwrap();
    from_checks(&[a, b])
}

fn gradient_checks() -> Outcome {
    from_checks(&[
        verify::densification_gradient_check(SEED, 50).unwrap(),
        verify::composite_gradient_check(SEED).unwrap(),
    ])
}

fn flagship() -> Outcome {
    from_checks(&verify::flagship_checks(SEED).unwrap())
}

fn directional_stitching() -> Outcome {
    let cfg = ExperimentConfig::default();
    assert_eq!((cfg.data.classes, cfg.data.samples, cfg.arch.latent_dim, cfg.runs), (2, 2000, 16, 5));
    let result = run_experiment(&cfg).unwrap();
    let acc = |m| result.report.cross_domain_accuracy(m).unwrap();
    let (abs, van, rob) = (acc(Mode::Absolute), acc(Mode::RelativeVanilla), acc(Mode::RelativeRobust));
    Outcome {
        passed: rob >= van && rob >= abs,
        detail: format!("cross-domain acc robust {rob:.2}, vanilla {van:.2}, absolute {abs:.2}"),
    }
}

fn densification_config(placement: Placement) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        modes: vec![Mode::RelativeRobust],
        ..ExperimentConfig::default()
    };
    cfg.arch.latent_dim = 64;
    cfg.arch.hidden = vec![64];
    cfg.train.epochs = 20;
    cfg.topo.placement = placement;
    assert_eq!((cfg.topo.lambda_pre, cfg.topo.lambda_post, cfg.topo.beta), (2e-3, 1.8e-2, 3.0));
    cfg
}

fn death_summary(r: &ExperimentResult, domain: Domain, space: Space) -> (f64, f64) {
    let rec = r
        .deaths
        .iter()
        .find(|d| d.domain == domain && d.space == space)
        .expect("death record");
    let s = summarize(&rec.deaths).expect("deaths");
    (s.mean, s.std)
}

fn densification_effect() -> Outcome {
    let reg = run_experiment(&densification_config(Placement::Combined)).unwrap();
    let base = run_experiment(&densification_config(Placement::None)).unwrap();
    let beta = 3.0;
    let mut passed = true;
    let mut parts = Vec::new();
    for domain in Domain::BOTH {
        let mut intervals = Vec::new();
        for space in [Space::Pre, Space::Post] {
            let (m, s) = death_summary(&reg, domain, space);
            let (bm, _) = death_summary(&base, domain, space);
            let closer = (m - beta).abs() < (bm - beta).abs();
            passed &= closer;
            parts.push(format!(
                "{}/{} reg {m:.3}+-{s:.3} vs base {bm:.3}{}",
                domain.name(),
                space.name(),
                if closer { "" } else { " (not closer)" }
            ));
            intervals.push((m - s, m + s));
        }
        let overlap = intervals[0].0 <= intervals[1].1 && intervals[1].0 <= intervals[0].1;
        passed &= overlap;
        if !overlap {
            parts.push(format!("{} intervals disjoint", domain.name()));
        }
    }
    Outcome {
        passed,
        detail: parts.join(", "),
    }
}

fn imbalanced_labels() -> Vec<usize> {
    let mut labels: Vec<usize> = (0..960).map(|i| usize::from(i % 10 == 9)).collect();
    labels.rotate_left(3);
    labels
}

fn loader_properties() -> Outcome {
    let labels = imbalanced_labels();
    let n_total = labels.len();
    let (n, b, batches) = (16, 2, 1000);
    let minority = 1;
    let mut topo = TopoLoader::new(&labels, n, SEED).unwrap();
    let mut topo_hits = 0;
    for _ in 0..batches {
        let batch = topo.next_batch();
        if batch.sub_batches().iter().flat_map(|s| &s.indices).any(|&i| labels[i] == minority) {
            topo_hits += 1;
        }
    }
    let mut orig = OriginalLoader::new(&labels, b, n, SEED).unwrap();
    let mut orig_hits = 0;
    for _ in 0..batches {
        if orig.next_batch().iter().flatten().any(|&i| labels[i] == minority) {
            orig_hits += 1;
        }
    }
    let topo_rate = topo_hits as f64 / batches as f64;
    let orig_rate = orig_hits as f64 / batches as f64;

    let mut topo_epoch = TopoLoader::new(&labels, n, SEED).unwrap();
    for _ in 0..topo_epoch.epoch_len() {
        topo_epoch.next_batch();
    }
    let mut orig_epoch = OriginalLoader::new(&labels, b, n, SEED).unwrap();
    for _ in 0..orig_epoch.epoch_len() {
        orig_epoch.next_batch();
    }
    let topo_passes = topo_epoch.counters().standard_passes(n_total);
    let orig_passes = orig_epoch.counters().standard_passes(n_total);
    Outcome {
        passed: topo_rate == 1.0 && orig_rate < 0.3 && topo_passes == 1.0 && orig_passes == n as f64,
        detail: format!(
            "minority in {:.1}% of K+1 batches, {:.1}% of original batches (b={b}); epoch passes {topo_passes}x vs {orig_passes}x (n={n})",
            100.0 * topo_rate,
            100.0 * orig_rate
        ),
    }
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.samples = 400;
    cfg.runs = 2;
    cfg.train.epochs = 3;
    cfg.train.seed = 5;
    cfg.topo.placement = Placement::Combined;
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        write_experiment(&run_experiment(&cfg).unwrap(), &cfg, &out).unwrap();
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    Outcome {
        passed: reports[0] == reports[1] && !reports[0].is_empty(),
        detail: format!("report.csv {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome, Option<u64>);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "robust transform invariance", robust_invariance, Some(5)),
        (2, "vanilla transform contrast", vanilla_contrast, None),
        (3, "intertwiner network invariance", intertwiner_networks, Some(10)),
        (4, "persistence oracle", persistence_oracle, None),
        (5, "gradient checks", gradient_checks, None),
        (6, "flagship intertwiner stitching", flagship, Some(30)),
        (7, "directional stitching", directional_stitching, Some(600)),
        (8, "densification effect", densification_effect, None),
        (9, "K+1 loader", loader_properties, None),
        (10, "experiment determinism", determinism, None),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, run, limit) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = within(outcome, elapsed, limit.map(Duration::from_secs));
        println!(
            "criterion {id:>2} {} {name} ({elapsed:.2?}): {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
        if !outcome.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
