use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audit::Violation;
use super::experiment::{ConditionReport, ExperimentOutput, WindowOutcome};
use super::PredictionRecord;
use crate::data::DatasetSummary;
use crate::error::{Error, Result};
use crate::training::write_trace_csv;

pub const REPORT_VERSION: u32 = 1;

/// Everything written to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub format: String,
    pub version: u32,
    /// The fully resolved configuration that produced this report.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub dataset: DatasetSummary,
    pub audit_passed: bool,
    pub violations: Vec<Violation>,
    pub conditions: Vec<ConditionReport>,
    pub windows: Vec<WindowOutcome>,
    pub maximal: WindowOutcome,
}

impl ReportBundle {
    pub fn new(config: serde_json::Value, seeds: BTreeMap<String, u64>, dataset: DatasetSummary, output: &ExperimentOutput) -> Self {
        let violations = output
            .windows
            .iter()
            .chain([&output.maximal])
            .flat_map(|w| w.audit.violations.iter().cloned())
            .collect();
        ReportBundle {
            format: "watchanxiety-report".into(),
            version: REPORT_VERSION,
            config,
            seeds,
            dataset,
            audit_passed: output.audit_passed(),
            violations,
            conditions: output.conditions.clone(),
            windows: output.windows.clone(),
            maximal: output.maximal.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bundle: ReportBundle = serde_json::from_str(s)?;
        if bundle.format != "watchanxiety-report" || bundle.version != REPORT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported report `{}` version {}",
                bundle.format, bundle.version
            )));
        }
        Ok(bundle)
    }

    pub fn condition(&self, window: &str, condition: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.window == window && c.condition == condition)
    }

    /// Writes `report.json`, `report.md`, `predictions.jsonl`, per-fold training
    /// traces and per-window selection and coefficient files under `dir`.
    pub fn write(&self, output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        create_dir(dir)?;
        let path = dir.join("report.json");
        write_file(&path, self.to_json()?.as_bytes())?;
        written.push(path);
        let path = dir.join("report.md");
        write_file(&path, render_markdown(self).as_bytes())?;
        written.push(path);
        let path = dir.join("predictions.jsonl");
        write_predictions_jsonl(&output.predictions(), &path)?;
        written.push(path);

        let traces = dir.join("traces");
        for w in &output.windows {
            if !w.traces.is_empty() {
                create_dir(&traces)?;
            }
            for (fold, trace) in &w.traces {
                let path = traces.join(format!("{}_fold{:02}.csv", w.window, fold));
                write_trace_csv(trace, &path)?;
                written.push(path);
            }
            let path = dir.join(format!("selection_{}.json", w.window));
            write_file(&path, (serde_json::to_string_pretty(&w.selections)? + "\n").as_bytes())?;
            written.push(path);
            let path = dir.join(format!("logit_{}.json", w.window));
            write_file(&path, (serde_json::to_string_pretty(&w.logit_coefficients)? + "\n").as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One JSON object per line, in the given order.
pub fn write_predictions_jsonl(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn row(out: &mut String, name: &str, traits: &str, c: &ConditionReport) {
    let m = &c.metrics;
    let _ = writeln!(
        out,
        "| {name} | {} | {traits} | {} | {} | {} | {} | {} |",
        m.n,
        pct(m.weighted_precision),
        pct(m.recall),
        pct(m.specificity),
        pct(m.balanced_accuracy),
        pct(m.weighted_f1)
    );
}

const HEADER: &str = "| Model | EMAs | Trait | Prec. | Rec. | Spec. | BA | F1 |\n|---|---|---|---|---|---|---|---|\n";

fn config_usize(bundle: &ReportBundle, path: &[&str]) -> String {
    let mut v = &bundle.config;
    for key in path {
        match v.get(key) {
            Some(next) => v = next,
            None => return "?".into(),
        }
    }
    v.as_u64().map_or("?".into(), |n| n.to_string())
}

/// Human-readable summary: the headline table, the ablation table and the audit.
pub fn render_markdown(bundle: &ReportBundle) -> String {
    let meta_k = config_usize(bundle, &["pipeline", "stack", "k"]);
    let trait_k = config_usize(bundle, &["pipeline", "trait_only_k"]);
    let ablation_k = config_usize(bundle, &["pipeline", "ablation_k"]);
    let mut out = String::new();
    let _ = writeln!(out, "# WatchAnxiety report\n");
    let d = &bundle.dataset;
    let _ = writeln!(
        out,
        "{} participants, {} EMAs ({} positive), {} heart-rate samples.\n",
        d.participants,
        d.emas,
        pct(d.class1_proportion) + "%",
        d.hr_samples
    );
    let seeds: Vec<String> = bundle.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(out, "Seeds: {}\n", seeds.join(", "));

    let _ = writeln!(out, "## Performance\n");
    out.push_str(HEADER);
    for w in &bundle.windows {
        if let Some(c) = bundle.condition(&w.window, "meta") {
            row(&mut out, &format!("Meta ({})", w.window), &meta_k, c);
        }
    }
    for (cond, name, k) in [("trait_only", "Baseline 1 (traits)", trait_k.as_str()), ("random", "Baseline 2 (random)", "--")] {
        if let Some(c) = bundle.condition("all", cond) {
            row(&mut out, &format!("{name}, all EMAs"), k, c);
        }
        for w in &bundle.windows {
            if let Some(c) = bundle.condition(&w.window, cond) {
                row(&mut out, &format!("{name}, {}", w.window), k, c);
            }
        }
    }

    let _ = writeln!(out, "\n## Ablation\n");
    out.push_str(HEADER);
    for w in &bundle.windows {
        if let Some(c) = bundle.condition(&w.window, "tl_only") {
            row(&mut out, &format!("TL only ({})", w.window), "--", c);
        }
        if let Some(c) = bundle.condition(&w.window, "trait_only_ablation") {
            row(&mut out, &format!("Traits only ({})", w.window), &ablation_k, c);
        }
    }

    let _ = writeln!(out, "\n## Per-participant balanced accuracy\n");
    let _ = writeln!(out, "| Window | Condition | Mean | SD | Min | Max |\n|---|---|---|---|---|---|");
    for c in &bundle.conditions {
        if let Some(s) = &c.metrics.per_participant_summary {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                c.window,
                c.condition,
                pct(s.mean),
                pct(s.sd),
                pct(s.min),
                pct(s.max)
            );
        }
    }

    let _ = writeln!(out, "\n## Windows\n");
    let _ = writeln!(out, "| Window | EMAs | Included | Degenerate plots | Flagged folds |\n|---|---|---|---|---|");
    for w in &bundle.windows {
        let flagged = w.tl_plan.folds.iter().filter(|f| f.flagged).count();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            w.window, w.emas, w.windows_included, w.degenerate_plots, flagged
        );
    }

    let _ = writeln!(out, "\n## Leakage audit\n");
    if bundle.audit_passed {
        let checked: usize = bundle.windows.iter().chain([&bundle.maximal]).map(|w| w.audit.records_checked).sum();
        let _ = writeln!(out, "Passed ({checked} records checked).");
    } else {
        let _ = writeln!(out, "FAILED with {} violations:\n", bundle.violations.len());
        for v in &bundle.violations {
            let _ = writeln!(out, "- {:?} fold {} participant {}: {}", v.kind, v.fold_id, v.participant_id, v.detail);
        }
    }
    out
}
