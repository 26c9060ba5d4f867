//! Batch entry points behind the `watchanxiety` binary. Each writes its outputs
//! under a directory and returns a short summary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, ImageFormat};
use crate::data::{dataset_summary, export_dataset, generate_synthetic, DatasetSummary, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{render_markdown, run_experiment, PretrainMode, ReportBundle};
use crate::preprocess::extract_all_windows;
use crate::recurrence::{featurize_window, write_pgm, write_png, RqaMeasures};
use crate::verify::{run_oracles, Fault, OracleResult};

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, Serialize)]
struct SynthManifest<'a> {
    format: &'static str,
    seed: u64,
    config: &'a SynthConfig,
    summary: &'a DatasetSummary,
}

/// Generates the synthetic study of `cfg.dataset.synth` and writes the CSVs plus
/// `manifest.json` into `out_dir`.
pub fn synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DatasetSummary> {
    let ds = generate_synthetic(&cfg.dataset.synth)?;
    export_dataset(&ds, out_dir)?;
    let summary = dataset_summary(&ds);
    let manifest = SynthManifest {
        format: "watchanxiety-synthetic",
        seed: cfg.dataset.synth.seed,
        config: &cfg.dataset.synth,
        summary: &summary,
    };
    write_json(&manifest, &out_dir.join("manifest.json"))?;
    Ok(summary)
}

/// One line of `windows.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct WindowRow {
    pub participant_id: String,
    pub ema_ts: f64,
    pub label: u8,
    pub window: String,
    pub rri: Vec<f64>,
    pub t: Vec<f64>,
    pub epsilon: f64,
    pub degenerate: bool,
    pub ties_at_threshold: usize,
    pub rqa: RqaMeasures,
    /// Plot image path relative to the window directory.
    pub plot: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeaturizeSummary {
    pub window: String,
    pub emas: usize,
    pub windows: usize,
    pub degenerate: usize,
    pub dir: PathBuf,
}

/// File-name stem for one window's plot.
pub fn plot_stem(participant_id: &str, ema_ts: f64) -> String {
    format!("{participant_id}_{ema_ts}")
}

/// Writes `<out_dir>/<window>/windows.jsonl` and one plot image per row for every
/// configured window length.
pub fn featurize(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<FeaturizeSummary>> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    let p = &cfg.pipeline;
    let mut summaries = Vec::new();
    for &spec in &p.windows {
        let label = spec.label();
        let dir = out_dir.join(&label);
        let plots = dir.join("plots");
        create_dir(&plots)?;
        let extraction = extract_all_windows(&ds, spec);
        let emas = extraction.iter().map(|(_, e)| e.counts.len()).sum();
        let mut lines = String::new();
        let mut summary = FeaturizeSummary {
            window: label.clone(),
            emas,
            windows: 0,
            degenerate: 0,
            dir: dir.clone(),
        };
        for w in extraction.iter().flat_map(|(_, e)| &e.windows) {
            let f = featurize_window(w, &p.embedding, p.plot_side).map_err(|e| e.in_stage(format!("featurize {label}")))?;
            let ext = match cfg.featurize.image_format {
                ImageFormat::Pgm => "pgm",
                ImageFormat::Png => "png",
            };
            let rel = format!("plots/{}.{ext}", plot_stem(&w.participant_id, w.ema_timestamp));
            match cfg.featurize.image_format {
                ImageFormat::Pgm => write_pgm(&f.plot, &dir.join(&rel))?,
                ImageFormat::Png => write_png(&f.plot, &dir.join(&rel))?,
            }
            let row = WindowRow {
                participant_id: w.participant_id.clone(),
                ema_ts: w.ema_timestamp,
                label: w.label,
                window: label.clone(),
                rri: w.rri_series.rri.clone(),
                t: w.rri_series.t.clone(),
                epsilon: f.epsilon,
                degenerate: f.degenerate,
                ties_at_threshold: f.ties_at_threshold,
                rqa: f.rqa,
                plot: rel,
            };
            lines.push_str(&serde_json::to_string(&row)?);
            lines.push('\n');
            summary.windows += 1;
            summary.degenerate += usize::from(f.degenerate);
        }
        let path = dir.join("windows.jsonl");
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Runs the experiment and writes the report bundle into `out_dir`.
///
/// The bundle is written even when the leakage audit fails; the failure is then
/// returned as [`Error::AuditFailed`].
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReportBundle> {
    cfg.validate()?;
    let ds = cfg.dataset.load().map_err(|e| e.in_stage("load dataset"))?;
    let source = match (&cfg.source_dataset, cfg.pipeline.pretrain) {
        (Some(src), PretrainMode::Source) => Some(src.load().map_err(|e| e.in_stage("load source dataset"))?),
        _ => None,
    };
    let output = run_experiment(&ds, &cfg.pipeline, source.as_ref())?;
    let bundle = ReportBundle::new(serde_json::to_value(cfg)?, cfg.seeds(), dataset_summary(&ds), &output);
    bundle.write(&output, out_dir)?;
    if !bundle.audit_passed {
        return Err(Error::AuditFailed(bundle.violations.len()));
    }
    Ok(bundle)
}

/// Re-renders `report.md` from `report.json` in `dir` and returns the markdown.
pub fn report(dir: &Path) -> Result<String> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bundle = ReportBundle::from_json(&text).map_err(|e| e.in_stage(path.display().to_string()))?;
    let md = render_markdown(&bundle);
    let out = dir.join("report.md");
    std::fs::write(&out, &md).map_err(|e| Error::io(&out, e))?;
    Ok(md)
}

/// Runs the oracle suite; `seed` drives the random fixtures.
pub fn verify(seed: u64, faults: &BTreeSet<Fault>) -> Vec<OracleResult> {
    run_oracles(seed, faults)
}
