//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the summary lines are always printed. The
//! pipeline criteria (11-13) dominate the runtime; expect roughly forty minutes on
//! one core.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use watchanxiety::commands;
use watchanxiety::config::ExperimentConfig;
use watchanxiety::data::generate_synthetic;
use watchanxiety::evaluation::{
    audit_leakage, run_experiment, Confusion, MetricsReport, PipelineConfig, ReportBundle, Stage, ViolationKind,
};
use watchanxiety::nn::{BackboneConfig, OptimizerConfig};
use watchanxiety::preprocess::WindowSpec;
use watchanxiety::stacking::baseline_random;
use watchanxiety::verify::{self, Check};

const SEED: u64 = 20_241_015;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn from_checks(checks: &[Check]) -> Self {
        let failed: Vec<String> = checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (worst {:.3e} > {:.1e}: {})", c.name, c.worst, c.tolerance, c.detail))
            .collect();
        let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
        Outcome {
            passed: failed.is_empty(),
            detail: if failed.is_empty() {
                format!("{} checks, worst {worst:.3e}", checks.len())
            } else {
                failed.join("; ")
            },
        }
    }
}

fn criterion(results: &mut Vec<bool>, id: usize, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = took <= budget;
    let passed = out.passed && in_time;
    let timing = if in_time { String::new() } else { format!(" [over budget {:.0?}]", budget) };
    println!(
        "criterion {id:>2} {} {title}: {} ({:.1?}){timing}",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        took
    );
    results.push(passed);
}

/// 1.5-hour window, desk backbone at 64 px, learning rates scaled for a randomly
/// initialised network.
fn desk_pipeline() -> PipelineConfig {
    let mut p = PipelineConfig {
        windows: vec![WindowSpec { length_s: 5400.0, min_samples: 50 }],
        ..PipelineConfig::default()
    };
    p.base.phase1.optimizer = OptimizerConfig::sgd(0.05);
    p.base.phase1.max_epochs = 5;
    p.base.phase2.optimizer = OptimizerConfig::sgd(0.05);
    p.base.phase2.max_epochs = 20;
    p.base.phase2.patience = Some(3);
    p.head.optimizer = OptimizerConfig::nadam(0.01);
    p.head.max_epochs = 10;
    p
}

fn planted_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        pipeline: desk_pipeline(),
        ..ExperimentConfig::default()
    };
    cfg.dataset.synth.coupling_strength = 1.0;
    cfg.dataset.synth.n_participants = 12;
    cfg.dataset.synth.n_days = 10;
    cfg.dataset.synth.emas_per_day = 7;
    cfg.set_seed(SEED);
    cfg
}

fn null_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        pipeline: desk_pipeline(),
        ..ExperimentConfig::default()
    };
    cfg.pipeline.base.phase1.max_epochs = 2;
    cfg.pipeline.base.phase2.max_epochs = 2;
    cfg.pipeline.head.max_epochs = 3;
    cfg.dataset.synth.coupling_strength = 0.0;
    cfg.dataset.synth.trait_coupling = 0.0;
    cfg.dataset.synth.n_participants = 12;
    cfg.dataset.synth.n_days = 30;
    cfg.set_seed(SEED);
    cfg
}

fn ba(bundle: &ReportBundle, window: &str, condition: &str) -> f64 {
    bundle
        .condition(window, condition)
        .unwrap_or_else(|| panic!("missing {window}/{condition}"))
        .metrics
        .balanced_accuracy
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: false,
        detail: detail.into(),
    }
}

fn same_bytes(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs"));
        }
    }
    Ok(())
}

fn leakage() -> Outcome {
    let mut synth = watchanxiety::data::SynthConfig {
        n_participants: 12,
        n_days: 2,
        seed: SEED,
        ..Default::default()
    };
    synth.emas_per_day = 4;
    let ds = match generate_synthetic(&synth) {
        Ok(ds) => ds,
        Err(e) => return fail(e.to_string()),
    };
    let mut p = PipelineConfig {
        windows: vec![WindowSpec { length_s: 3600.0, min_samples: 50 }],
        plot_side: 16,
        ..PipelineConfig::default()
    };
    p.backbone = BackboneConfig { input_side: 16, ..BackboneConfig::desk() };
    p.base.phase1.max_epochs = 1;
    p.base.phase2.max_epochs = 1;
    p.head.max_epochs = 1;
    let out = match run_experiment(&ds, &p, None) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string()),
    };
    if !out.audit_passed() {
        return fail("clean pipeline run reported violations");
    }
    let w = &out.windows[0];
    let tl: Vec<_> = w.records.iter().filter(|r| r.stage == Stage::Tl).cloned().collect();
    let mut meta: Vec<_> = w.records.iter().filter(|r| r.stage == Stage::Meta).cloned().collect();
    let clean = audit_leakage(&w.tl_plan, &w.meta_plan, &tl, &meta, &[]);
    if !clean.passed() {
        return fail("re-audit of clean records reported violations");
    }
    let pid = meta[0].participant_id.clone();
    let Some(train_fold) = w.tl_plan.folds.iter().find(|f| f.train.contains(&pid)) else {
        return fail("no fold trains on the planted participant");
    };
    meta[0].tl_fold_id = Some(train_fold.fold_id);
    let planted = audit_leakage(&w.tl_plan, &w.meta_plan, &tl, &meta, &[]);
    let caught = planted
        .violations
        .iter()
        .any(|v| v.kind == ViolationKind::TlSourceNotTest && v.participant_id == pid);
    let mut checks = verify::audit_oracles(SEED);
    checks.push(Check {
        name: "pipeline planted violation detected".into(),
        passed: caught,
        worst: f64::from(u8::from(!caught)),
        tolerance: 0.0,
        detail: format!("{} violation(s)", planted.violations.len()),
    });
    Outcome::from_checks(&checks)
}

fn null_signal() -> Outcome {
    let cfg = null_config();
    let dir = tempfile::tempdir().expect("tempdir");
    let bundle = match commands::run(&cfg, dir.path()) {
        Ok(b) => b,
        Err(e) => return fail(e.to_string()),
    };
    let emas = bundle.condition("1.5h", "meta").map_or(0, |c| c.metrics.n);
    let mut parts = vec![format!("{emas} EMAs")];
    let mut passed = emas >= 2000 && bundle.audit_passed;
    for cond in ["meta", "tl_only", "trait_only"] {
        let v = ba(&bundle, "1.5h", cond);
        passed &= (v - 0.5).abs() <= 0.05;
        parts.push(format!("{cond} {:.1}%", v * 100.0));
    }
    // Random draws against the observed label sequence, cycled to 100,000.
    let labels: Vec<u8> = bundle
        .condition("1.5h", "random")
        .map(|c| {
            let m = &c.metrics.confusion;
            let pos = m.tp + m.fn_;
            let neg = m.tn + m.fp;
            std::iter::repeat_n(1u8, pos).chain(std::iter::repeat_n(0u8, neg)).collect()
        })
        .unwrap_or_default();
    if labels.is_empty() {
        return fail("no random baseline");
    }
    let draws = baseline_random(100_000, SEED);
    let conf = Confusion::from_pairs(draws.iter().enumerate().map(|(i, &p)| (labels[i % labels.len()], p)));
    let random = MetricsReport::from_confusion(conf).balanced_accuracy;
    passed &= (random - 0.5).abs() <= 0.02;
    parts.push(format!("random@100k {:.2}%", random * 100.0));
    Outcome {
        passed,
        detail: parts.join(", "),
    }
}

fn planted_signal(dir: &Path) -> Outcome {
    let cfg = planted_config();
    let bundle = match commands::run(&cfg, dir) {
        Ok(b) => b,
        Err(e) => return fail(e.to_string()),
    };
    let meta = ba(&bundle, "1.5h", "meta");
    let random = ba(&bundle, "1.5h", "random");
    let margin = (meta - random) * 100.0;
    let mut passed = margin >= 15.0;
    let mut detail = format!("meta {:.1}%, random {:.1}%, margin {margin:.1} pts", meta * 100.0, random * 100.0);

    let text = std::fs::read_to_string(dir.join("predictions.jsonl")).expect("predictions written");
    let mut per: BTreeMap<(String, String), BTreeSet<u8>> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("jsonl");
        if v["condition"] == "trait_only" {
            per.entry((v["window"].as_str().unwrap().into(), v["participant_id"].as_str().unwrap().into()))
                .or_default()
                .insert(v["predicted_class"].as_u64().unwrap() as u8);
        }
    }
    let constant = !per.is_empty() && per.values().all(|s| s.len() == 1);
    let mut scores = BTreeSet::new();
    for window in ["1.5h", "all"] {
        if let Some(c) = bundle.condition(window, "trait_only") {
            for p in &c.metrics.per_participant {
                scores.insert((p.balanced_accuracy * 100.0).round() as i64);
            }
        }
    }
    let allowed = scores.iter().all(|s| [0, 50, 100].contains(s));
    passed &= constant && allowed && bundle.audit_passed;
    detail.push_str(&format!(
        "; trait-only constant per participant: {constant}, per-participant BA values {scores:?}"
    ));
    Outcome { passed, detail }
}

fn main() {
    let mut results = Vec::new();
    let secs = Duration::from_secs;

    criterion(&mut results, 1, "metric arithmetic fixture", secs(1), || {
        Outcome::from_checks(&[verify::metric_fixture()])
    });
    criterion(&mut results, 2, "metric oracle", secs(5), || {
        Outcome::from_checks(&[verify::metric_oracle(SEED, 500)])
    });
    criterion(&mut results, 3, "gradient correctness", secs(120), || {
        Outcome::from_checks(&verify::gradient_checks(SEED, false))
    });
    criterion(&mut results, 4, "focal loss reduces to BCE", secs(1), || {
        Outcome::from_checks(&[verify::focal_bce_oracle(10_000)])
    });
    criterion(&mut results, 5, "RQA oracles", secs(30), || Outcome::from_checks(&verify::rqa_oracles(SEED)));
    criterion(&mut results, 6, "preprocessing oracles", secs(10), || {
        Outcome::from_checks(&verify::preprocessing_oracles(SEED))
    });
    criterion(&mut results, 7, "imputation independence", secs(5), || {
        Outcome::from_checks(&[verify::imputation_oracle(SEED, 100)])
    });
    criterion(&mut results, 8, "fold integrity", secs(30), || {
        Outcome::from_checks(&[verify::fold_oracle(SEED, 100)])
    });
    criterion(&mut results, 9, "leakage audit", secs(10), leakage);
    criterion(&mut results, 10, "callback rule oracle", secs(5), || {
        Outcome::from_checks(&verify::callback_oracles(SEED, 1000))
    });
    criterion(&mut results, 11, "null-signal calibration", secs(15 * 60), null_signal);

    let first = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    criterion(&mut results, 12, "planted-signal detection", secs(30 * 60), || planted_signal(first.path()));
    let single = start.elapsed();
    criterion(&mut results, 13, "determinism", (single * 2).max(secs(60)), || {
        let second = tempfile::tempdir().expect("tempdir");
        if let Err(e) = commands::run(&planted_config(), second.path()) {
            return fail(e.to_string());
        }
        match same_bytes(first.path(), second.path(), &["predictions.jsonl", "report.json"]) {
            Ok(()) => Outcome {
                passed: true,
                detail: "predictions.jsonl and report.json byte-identical".into(),
            },
            Err(e) => fail(e),
        }
    });

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
