use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audit::{audit_leakage, AuditReport, FitProvenance, PlanStage};
use super::folds::{plan_lfocv, plan_loocv, Fold, FoldConfig, FoldPlan, ParticipantLabels, PlanKind};
use super::metrics::{compute_metrics, Confusion, MetricsReport};
use super::{PredictionRecord, Stage};
use crate::data::{Dataset, ScaleId};
use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, Network};
use crate::preprocess::{extract_all_windows, WindowSpec};
use crate::recurrence::{featurize_windows, EmbeddingParams, FeaturizedWindow};
use crate::stacking::{baseline_random, baseline_trait_only, fit_stack, LogitCoefficients, SelectionReport, StackConfig, StackModel, StackRow};
use crate::training::{
    calibrate_batchnorm, predict_probabilities, train_base, tune_head, BaseTrainSchedule, EpochTrace, HeadTuneSchedule,
    ImageSet,
};

/// Condition names, in report order.
pub const CONDITIONS: [&str; 5] = ["meta", "tl_only", "trait_only", "trait_only_ablation", "random"];

/// Where the base network of each transfer-learning fold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Train a base network inside every fold on that fold's training participants.
    #[default]
    InFold,
    /// Train base networks across folds of a separate source dataset, keep the one
    /// with the best test balanced accuracy, and only tune heads on the target.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub windows: Vec<WindowSpec>,
    pub embedding: EmbeddingParams,
    pub plot_side: usize,
    pub backbone: BackboneConfig,
    pub base: BaseTrainSchedule,
    pub head: HeadTuneSchedule,
    pub stack: StackConfig,
    /// Traits kept by the trait-only baseline.
    pub trait_only_k: usize,
    /// Traits kept by the ablation variant of the trait-only baseline.
    pub ablation_k: usize,
    pub folds: FoldConfig,
    pub pretrain: PretrainMode,
    /// Fold planning and network initialisation.
    pub seed: u64,
    pub random_baseline_seed: u64,
    /// Concurrent folds.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            windows: [3600.0, 5400.0, 7200.0]
                .iter()
                .map(|&length_s| WindowSpec {
                    length_s,
                    min_samples: 50,
                })
                .collect(),
            embedding: EmbeddingParams::default(),
            plot_side: 64,
            backbone: BackboneConfig::desk(),
            base: BaseTrainSchedule::default(),
            head: HeadTuneSchedule::default(),
            stack: StackConfig::default(),
            trait_only_k: 5,
            ablation_k: 4,
            folds: FoldConfig::default(),
            pretrain: PretrainMode::InFold,
            seed: 0,
            random_baseline_seed: 0,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    /// Overrides every stage seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.random_baseline_seed = seed;
        self.base.seed = seed;
        self.head.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::InvalidConfig("at least one window spec is required".into()));
        }
        for w in &self.windows {
            w.validate()?;
        }
        self.embedding.validate()?;
        self.backbone.validate()?;
        if self.plot_side != self.backbone.input_side {
            return Err(Error::InvalidConfig(format!(
                "plot side {} differs from backbone input side {}",
                self.plot_side, self.backbone.input_side
            )));
        }
        self.base.validate()?;
        self.head.validate()?;
        if self.jobs == 0 {
            return Err(Error::InvalidConfig("jobs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stack.threshold) {
            return Err(Error::InvalidConfig("decision threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Test balanced accuracy of each source fold's base network and the one kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSelection {
    pub plan: FoldPlan,
    pub fold_balanced_accuracy: Vec<f64>,
    pub selected_fold: usize,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub window: String,
    pub condition: String,
    pub metrics: MetricsReport,
}

/// Everything produced for one window spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub window: String,
    /// `None` for the maximal EMA set.
    pub spec: Option<WindowSpec>,
    pub emas: usize,
    pub windows_included: usize,
    pub degenerate_plots: usize,
    pub tl_plan: FoldPlan,
    pub meta_plan: FoldPlan,
    pub source_selection: Option<SourceSelection>,
    /// Meta-learner trait selection per leave-one-out fold.
    pub selections: Vec<SelectionReport>,
    pub logit_coefficients: Vec<LogitCoefficients>,
    #[serde(skip)]
    pub traces: Vec<(usize, Vec<EpochTrace>)>,
    pub model_hashes: Vec<String>,
    pub audit: AuditReport,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub windows: Vec<WindowOutcome>,
    /// Baselines over every labeled EMA, regardless of window availability.
    pub maximal: WindowOutcome,
    pub conditions: Vec<ConditionReport>,
}

impl ExperimentOutput {
    pub fn audit_passed(&self) -> bool {
        self.windows.iter().chain([&self.maximal]).all(|w| w.audit.passed())
    }

    /// All records, ordered by window, condition, participant and time.
    pub fn predictions(&self) -> Vec<PredictionRecord> {
        let mut all: Vec<PredictionRecord> = Vec::new();
        for w in self.windows.iter().chain([&self.maximal]) {
            all.extend(w.records.iter().cloned());
        }
        all
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn featurize(ds: &Dataset, spec: WindowSpec, cfg: &PipelineConfig) -> Result<(Vec<FeaturizedWindow>, usize)> {
    let extraction = extract_all_windows(ds, spec);
    let emas = extraction.iter().map(|(_, e)| e.counts.len()).sum();
    let windows: Vec<_> = extraction.into_iter().flat_map(|(_, e)| e.windows).collect();
    Ok((featurize_windows(&windows, &cfg.embedding, cfg.plot_side)?, emas))
}

fn label_counts(windows: &[FeaturizedWindow]) -> Vec<ParticipantLabels> {
    let mut by: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for w in windows {
        let e = by.entry(&w.participant_id).or_default();
        if w.label == 1 {
            e.1 += 1;
        } else {
            e.0 += 1;
        }
    }
    by.into_iter()
        .map(|(p, (n0, n1))| ParticipantLabels {
            participant_id: p.to_string(),
            n0,
            n1,
        })
        .collect()
}

fn subset(windows: &[FeaturizedWindow], members: &[String], channels: usize) -> Result<ImageSet<f64>> {
    let set: BTreeSet<&str> = members.iter().map(String::as_str).collect();
    ImageSet::from_windows(windows.iter().filter(|w| set.contains(w.participant_id.as_str())), channels)
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

fn trained_base(
    train: &ImageSet<f64>,
    val: &ImageSet<f64>,
    cfg: &PipelineConfig,
    fold_id: usize,
) -> Result<(Network<f64>, Vec<EpochTrace>)> {
    let mut net = Network::base(&cfg.backbone, fold_seed(cfg.seed, fold_id))?;
    calibrate_batchnorm(&mut net, train, cfg.base.batch_size)?;
    let schedule = BaseTrainSchedule {
        seed: fold_seed(cfg.base.seed, fold_id),
        ..cfg.base
    };
    let out = train_base(&net, train, val, &schedule)?;
    Ok((out.model, out.trace))
}

struct TlFold {
    records: Vec<PredictionRecord>,
    trace: Vec<EpochTrace>,
    fit: FitProvenance,
    hash: String,
}

fn run_tl_fold(
    fold: &Fold,
    windows: &[FeaturizedWindow],
    cfg: &PipelineConfig,
    source: Option<&Network<f64>>,
) -> Result<TlFold> {
    let channels = cfg.backbone.input_channels;
    let train = subset(windows, &fold.train, channels)?;
    let val = subset(windows, &fold.val, channels)?;
    let test = subset(windows, &fold.test, channels)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput(format!("fold {} has no training or validation windows", fold.fold_id)));
    }
    let (base, mut trace) = match source {
        Some(net) => (net.clone(), Vec::new()),
        None => trained_base(&train, &val, cfg, fold.fold_id)?,
    };
    let head = HeadTuneSchedule {
        seed: fold_seed(cfg.head.seed, fold.fold_id),
        ..cfg.head
    };
    let tuned = tune_head(&base, &train, &val, &head)?;
    trace.extend(tuned.trace);
    let records = predict_probabilities(&tuned.model, &test, fold.fold_id, cfg.base.batch_size)?;
    let participants: BTreeSet<String> = train
        .participant_set()
        .union(&val.participant_set())
        .map(|s| s.to_string())
        .collect();
    Ok(TlFold {
        hash: tuned.model.hash(),
        records,
        trace,
        fit: FitProvenance {
            stage: PlanStage::Tl,
            fold_id: fold.fold_id,
            label: "transfer model".into(),
            participants,
        },
    })
}

/// Base networks trained across leave-five-out folds of `source`; the one with the
/// highest test balanced accuracy is kept (lowest fold id on ties).
pub fn select_source_base(source: &Dataset, spec: WindowSpec, cfg: &PipelineConfig) -> Result<(Network<f64>, SourceSelection)> {
    let (windows, _) = featurize(source, spec, cfg)?;
    let plan = plan_lfocv(&label_counts(&windows), cfg.seed, &cfg.folds)?;
    let channels = cfg.backbone.input_channels;
    let fits = plan
        .folds
            .par_iter()
            .map(|fold| -> Result<(Network<f64>, f64)> {
                let train = subset(&windows, &fold.train, channels)?;
                let val = subset(&windows, &fold.val, channels)?;
                let test = subset(&windows, &fold.test, channels)?;
                let (net, _) = trained_base(&train, &val, cfg, fold.fold_id)?;
                let recs = predict_probabilities(&net, &test, fold.fold_id, cfg.base.batch_size)?;
                let ba = Confusion::from_pairs(recs.iter().map(|r| (r.label, r.predicted_class))).balanced_accuracy();
                Ok((net, ba))
            })
            .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (_, ba)) in fits.iter().enumerate() {
        if *ba > fits[best].1 {
            best = i;
        }
    }
    let net = fits[best].0.clone();
    let selection = SourceSelection {
        fold_balanced_accuracy: fits.iter().map(|f| f.1).collect(),
        selected_fold: plan.folds[best].fold_id,
        model_hash: net.hash(),
        plan,
    };
    Ok((net, selection))
}

fn stack_rows(ds: &Dataset, records: &[PredictionRecord]) -> Result<Vec<StackRow>> {
    records
        .iter()
        .map(|r| {
            let p = ds
                .participant(&r.participant_id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown participant `{}`", r.participant_id)))?;
            Ok(StackRow {
                participant_id: r.participant_id.clone(),
                ema_timestamp: r.ema_timestamp,
                label: r.label,
                tl_probability: r.tl_probability,
                tl_fold_id: r.tl_fold_id,
                traits: p.traits.clone(),
            })
        })
        .collect()
}

struct MetaStage {
    plan: FoldPlan,
    records: Vec<PredictionRecord>,
    fits: Vec<FitProvenance>,
    selections: Vec<SelectionReport>,
    coefficients: Vec<LogitCoefficients>,
}

fn baseline_record(window: &str, condition: &str, row: &StackRow, fold_id: usize, prob: Option<f64>, class: u8) -> PredictionRecord {
    PredictionRecord {
        window: window.into(),
        condition: condition.into(),
        participant_id: row.participant_id.clone(),
        ema_timestamp: row.ema_timestamp,
        label: row.label,
        tl_probability: None,
        meta_probability: prob,
        predicted_class: class,
        fold_id,
        tl_fold_id: None,
        stage: Stage::Baseline,
        model_hash: None,
    }
}

/// Leave-one-out meta stage and baselines over `rows` (sorted by participant, time).
fn run_meta_stage(rows: &[StackRow], scales: &[ScaleId], cfg: &PipelineConfig, window: &str, with_tl: bool) -> Result<MetaStage> {
    let ids: Vec<String> = rows.iter().map(|r| r.participant_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let plan = plan_loocv(&ids)?;
    let per_fold = plan
        .folds
            .par_iter()
            .map(|fold| -> Result<(Vec<PredictionRecord>, Vec<FitProvenance>, Option<(SelectionReport, Option<LogitCoefficients>)>)> {
                let held = &fold.test[0];
                let train: Vec<StackRow> = rows.iter().filter(|r| &r.participant_id != held).cloned().collect();
                let test: Vec<&StackRow> = rows.iter().filter(|r| &r.participant_id == held).collect();
                let mut records = Vec::new();
                let mut fits = Vec::new();
                let provenance = |label: &str, m: &StackModel| FitProvenance {
                    stage: PlanStage::Meta,
                    fold_id: fold.fold_id,
                    label: label.into(),
                    participants: m.fitted_on.clone(),
                };
                let mut summary = None;
                if with_tl {
                    let meta = fit_stack(&train, scales, &cfg.stack)?;
                    fits.push(provenance("meta-learner", &meta));
                    for r in &test {
                        let (p, class) = meta.predict(r)?;
                        records.push(PredictionRecord {
                            window: window.into(),
                            condition: "meta".into(),
                            participant_id: r.participant_id.clone(),
                            ema_timestamp: r.ema_timestamp,
                            label: r.label,
                            tl_probability: r.tl_probability,
                            meta_probability: Some(p),
                            predicted_class: class,
                            fold_id: fold.fold_id,
                            tl_fold_id: r.tl_fold_id,
                            stage: Stage::Meta,
                            model_hash: None,
                        });
                    }
                    summary = Some((meta.selection.clone(), meta.coefficients()));
                }
                for (condition, k) in [("trait_only", cfg.trait_only_k), ("trait_only_ablation", cfg.ablation_k)] {
                    let m = baseline_trait_only(&train, scales, k, &cfg.stack)?;
                    fits.push(provenance(condition, &m));
                    for r in &test {
                        let (p, class) = m.predict(r)?;
                        records.push(baseline_record(window, condition, r, fold.fold_id, Some(p), class));
                    }
                }
                Ok((records, fits, summary))
            })
            .collect::<Result<Vec<_>>>()?;
    let mut out = MetaStage {
        plan,
        records: Vec::new(),
        fits: Vec::new(),
        selections: Vec::new(),
        coefficients: Vec::new(),
    };
    for (records, fits, summary) in per_fold {
        out.records.extend(records);
        out.fits.extend(fits);
        if let Some((sel, coef)) = summary {
            out.selections.push(sel);
            out.coefficients.extend(coef);
        }
    }
    let draws = baseline_random(rows.len(), cfg.random_baseline_seed);
    for (r, class) in rows.iter().zip(draws) {
        let fold_id = out.plan.folds.iter().find(|f| f.test[0] == r.participant_id).map_or(0, |f| f.fold_id);
        out.records.push(baseline_record(window, "random", r, fold_id, None, class));
    }
    Ok(out)
}

fn sort_records(records: &mut [PredictionRecord]) {
    let rank = |c: &str| CONDITIONS.iter().position(|&k| k == c).unwrap_or(CONDITIONS.len());
    records.sort_by(|a, b| {
        rank(&a.condition)
            .cmp(&rank(&b.condition))
            .then_with(|| a.participant_id.cmp(&b.participant_id))
            .then_with(|| a.ema_timestamp.total_cmp(&b.ema_timestamp))
    });
}

/// The full nested pipeline for one window spec.
pub fn run_window(ds: &Dataset, spec: WindowSpec, cfg: &PipelineConfig, source: Option<&(Network<f64>, SourceSelection)>) -> Result<WindowOutcome> {
    let window = spec.label();
    let (windows, emas) = featurize(ds, spec, cfg).map_err(|e| e.in_stage(format!("featurize {window}")))?;
    let tl_plan = plan_lfocv(&label_counts(&windows), cfg.seed, &cfg.folds).map_err(|e| e.in_stage(format!("plan {window}")))?;
    let folds = tl_plan
        .folds
        .par_iter()
        .map(|f| run_tl_fold(f, &windows, cfg, source.map(|s| &s.0)).map_err(|e| e.in_stage(format!("transfer fold {}", f.fold_id))))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage(format!("window {window}")))?;

    let mut tl_records: Vec<PredictionRecord> = Vec::new();
    let mut fits = Vec::new();
    let mut traces = Vec::new();
    let mut hashes = Vec::new();
    for (f, out) in tl_plan.folds.iter().zip(folds) {
        tl_records.extend(out.records);
        fits.push(out.fit);
        traces.push((f.fold_id, out.trace));
        hashes.push(out.hash);
    }
    for r in &mut tl_records {
        r.window = window.clone();
    }
    sort_records(&mut tl_records);

    let scales: Vec<ScaleId> = ds.scales.iter().map(|s| s.scale).collect();
    let rows = stack_rows(ds, &tl_records)?;
    let meta = run_meta_stage(&rows, &scales, cfg, &window, true).map_err(|e| e.in_stage(format!("meta {window}")))?;
    fits.extend(meta.fits);
    let audit = audit_leakage(&tl_plan, &meta.plan, &tl_records, &meta.records, &fits);

    let mut records = tl_records;
    records.extend(meta.records);
    sort_records(&mut records);
    Ok(WindowOutcome {
        window,
        spec: Some(spec),
        emas,
        windows_included: windows.len(),
        degenerate_plots: windows.iter().filter(|w| w.degenerate).count(),
        tl_plan,
        meta_plan: meta.plan,
        source_selection: source.map(|s| s.1.clone()),
        selections: meta.selections,
        logit_coefficients: meta.coefficients,
        traces,
        model_hashes: hashes,
        audit,
        records,
    })
}

fn maximal_baselines(ds: &Dataset, cfg: &PipelineConfig) -> Result<WindowOutcome> {
    let mut rows = Vec::new();
    let mut ps: Vec<_> = ds.participants.iter().collect();
    ps.sort_by(|a, b| a.id.cmp(&b.id));
    for p in ps {
        let mut emas: Vec<_> = p.emas.iter().collect();
        emas.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for e in emas {
            rows.push(StackRow {
                participant_id: p.id.clone(),
                ema_timestamp: e.timestamp,
                label: e.label(),
                tl_probability: None,
                tl_fold_id: None,
                traits: p.traits.clone(),
            });
        }
    }
    let scales: Vec<ScaleId> = ds.scales.iter().map(|s| s.scale).collect();
    let meta = run_meta_stage(&rows, &scales, cfg, "all", false).map_err(|e| e.in_stage("baselines over all EMAs"))?;
    let empty = FoldPlan {
        kind: PlanKind::Lfocv,
        seed: cfg.seed,
        folds: Vec::new(),
    };
    let audit = audit_leakage(&empty, &meta.plan, &[], &meta.records, &meta.fits);
    let mut records = meta.records;
    sort_records(&mut records);
    Ok(WindowOutcome {
        window: "all".into(),
        spec: None,
        emas: rows.len(),
        windows_included: rows.len(),
        degenerate_plots: 0,
        tl_plan: empty,
        meta_plan: meta.plan,
        source_selection: None,
        selections: Vec::new(),
        logit_coefficients: Vec::new(),
        traces: Vec::new(),
        model_hashes: Vec::new(),
        audit,
        records,
    })
}

fn condition_reports(outcome: &WindowOutcome) -> Result<Vec<ConditionReport>> {
    let mut out = Vec::new();
    for c in CONDITIONS {
        let recs: Vec<PredictionRecord> = outcome.records.iter().filter(|r| r.condition == c).cloned().collect();
        if recs.is_empty() {
            continue;
        }
        out.push(ConditionReport {
            window: outcome.window.clone(),
            condition: c.to_string(),
            metrics: compute_metrics(&recs)?,
        });
    }
    Ok(out)
}

/// Runs every configured window, the maximal-set baselines, the leakage audit and
/// the metric suite. Callers decide what a failed audit means via
/// [`ExperimentOutput::audit_passed`].
///
/// Folds run concurrently on a pool of `cfg.jobs` threads; results are assembled
/// in fold order, so the output does not depend on the thread count.
pub fn run_experiment(ds: &Dataset, cfg: &PipelineConfig, source: Option<&Dataset>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    pool(cfg.jobs)?.install(|| experiment_body(ds, cfg, source))
}

fn experiment_body(ds: &Dataset, cfg: &PipelineConfig, source: Option<&Dataset>) -> Result<ExperimentOutput> {
    ds.validate()?;
    if cfg.pretrain == PretrainMode::Source && source.is_none() {
        return Err(Error::InvalidConfig("source pretraining needs a source dataset".into()));
    }
    let mut windows = Vec::new();
    for &spec in &cfg.windows {
        let src = match (cfg.pretrain, source) {
            (PretrainMode::Source, Some(s)) => {
                Some(select_source_base(s, spec, cfg).map_err(|e| e.in_stage(format!("source pretraining {}", spec.label())))?)
            }
            _ => None,
        };
        windows.push(run_window(ds, spec, cfg, src.as_ref())?);
    }
    let maximal = maximal_baselines(ds, cfg)?;
    let mut conditions = Vec::new();
    for w in windows.iter().chain([&maximal]) {
        conditions.extend(condition_reports(w)?);
    }
    let out = ExperimentOutput {
        windows,
        maximal,
        conditions,
    };
    Ok(out)
}
