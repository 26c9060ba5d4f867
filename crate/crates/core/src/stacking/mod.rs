//! Trait selection by information gain, meta-learners over the transfer-learning
//! probability plus selected traits, and the trait-only and random baselines.

mod gain;
mod models;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ScaleId, TraitProfile};
use crate::error::{Error, Result};

pub use gain::{bin_of, entropy_bits, equal_frequency_edges, information_gain, GainResult};
pub use models::{best_split, fit_meta, logistic, predict_meta, MetaKind, MetaModel, MetaParams, TreeNode};

/// One EMA as seen by the meta stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackRow {
    pub participant_id: String,
    pub ema_timestamp: f64,
    pub label: u8,
    pub tl_probability: Option<f64>,
    /// Fold of the transfer-learning stage that produced `tl_probability`.
    pub tl_fold_id: Option<usize>,
    pub traits: TraitProfile,
}

/// Whether selection gains are computed over EMA rows or one row per participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLevel {
    #[default]
    Ema,
    /// One row per participant, labeled by the majority of their EMA labels (ties to 1).
    Participant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub level: SelectionLevel,
    pub bins: usize,
    /// Gain per trait in bits, in scale order.
    pub gains: BTreeMap<ScaleId, f64>,
    pub edges: BTreeMap<ScaleId, Vec<f64>>,
    /// Top-k traits, best first.
    pub selected: Vec<ScaleId>,
    pub single_class: bool,
}

fn selection_table(rows: &[StackRow], level: SelectionLevel) -> Vec<(&TraitProfile, u8)> {
    match level {
        SelectionLevel::Ema => rows.iter().map(|r| (&r.traits, r.label)).collect(),
        SelectionLevel::Participant => {
            let mut by: BTreeMap<&str, (&TraitProfile, usize, usize)> = BTreeMap::new();
            for r in rows {
                let e = by.entry(&r.participant_id).or_insert((&r.traits, 0, 0));
                e.1 += 1;
                e.2 += r.label as usize;
            }
            by.values().map(|&(t, n, n1)| (t, (2 * n1 >= n) as u8)).collect()
        }
    }
}

/// Ranks `scales` by information gain with respect to the labels of `rows` and
/// keeps the best `k`; equal gains are ordered by scale id.
pub fn select_traits(rows: &[StackRow], scales: &[ScaleId], k: usize, bins: usize, level: SelectionLevel) -> SelectionReport {
    let table = selection_table(rows, level);
    let labels: Vec<u8> = table.iter().map(|t| t.1).collect();
    let mut gains = BTreeMap::new();
    let mut edges = BTreeMap::new();
    let mut single_class = false;
    for &s in scales {
        let values: Vec<f64> = table.iter().map(|t| t.0.score(s)).collect();
        let g = information_gain(&values, &labels, bins);
        single_class |= g.single_class;
        gains.insert(s, g.gain);
        edges.insert(s, g.edges);
    }
    let mut ranked: Vec<ScaleId> = scales.to_vec();
    ranked.sort_by(|a, b| gains[b].total_cmp(&gains[a]).then_with(|| a.as_str().cmp(b.as_str())));
    ranked.truncate(k.min(scales.len()));
    SelectionReport {
        level,
        bins,
        gains,
        edges,
        selected: ranked,
        single_class,
    }
}

/// Per-trait z-score statistics (population standard deviation; zero spread maps to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scales: Vec<ScaleId>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[StackRow], scales: &[ScaleId]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for &s in scales {
            let m = rows.iter().map(|r| r.traits.score(s)).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r.traits.score(s) - m).powi(2)).sum::<f64>() / n;
            means.push(m);
            sds.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Normalizer {
            scales: scales.to_vec(),
            means,
            sds,
        }
    }

    pub fn apply(&self, traits: &TraitProfile) -> Vec<f64> {
        self.scales
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(&s, (m, sd))| (traits.score(s) - m) / sd)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub kind: MetaKind,
    /// Number of traits kept by selection.
    pub k: usize,
    pub bins: usize,
    pub level: SelectionLevel,
    /// Prepend the transfer-learning probability to the traits.
    pub include_tl: bool,
    pub threshold: f64,
    pub params: MetaParams,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            kind: MetaKind::Logit,
            k: 4,
            bins: 10,
            level: SelectionLevel::Ema,
            include_tl: true,
            threshold: 0.5,
            params: MetaParams::default(),
        }
    }
}

/// A fitted stack: selection, normalisation and classifier, with the participants
/// whose rows were read while fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackModel {
    pub config: StackConfig,
    pub selection: SelectionReport,
    pub normalizer: Normalizer,
    pub model: MetaModel,
    pub feature_names: Vec<String>,
    pub fitted_on: BTreeSet<String>,
}

/// Logistic-regression coefficients by feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitCoefficients {
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl StackModel {
    pub fn features(&self, row: &StackRow) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.feature_names.len());
        if self.config.include_tl {
            x.push(row.tl_probability.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "row {}@{} lacks a transfer-learning probability",
                    row.participant_id, row.ema_timestamp
                ))
            })?);
        }
        x.extend(self.normalizer.apply(&row.traits));
        Ok(x)
    }

    pub fn predict(&self, row: &StackRow) -> Result<(f64, u8)> {
        Ok(predict_meta(&self.model, &self.features(row)?, self.config.threshold))
    }

    pub fn coefficients(&self) -> Option<LogitCoefficients> {
        match &self.model {
            MetaModel::Logit { weights, bias, .. } => Some(LogitCoefficients {
                features: self.feature_names.clone(),
                weights: weights.clone(),
                bias: *bias,
            }),
            _ => None,
        }
    }
}

/// Selects traits, fits the normaliser and the classifier on `rows` only.
pub fn fit_stack(rows: &[StackRow], scales: &[ScaleId], config: &StackConfig) -> Result<StackModel> {
    let selection = select_traits(rows, scales, config.k, config.bins, config.level);
    let normalizer = Normalizer::fit(rows, &selection.selected);
    let mut feature_names = Vec::new();
    if config.include_tl {
        feature_names.push("tl_probability".to_string());
    }
    feature_names.extend(selection.selected.iter().map(|s| s.as_str().to_string()));
    let mut stack = StackModel {
        config: config.clone(),
        selection,
        normalizer,
        model: MetaModel::Logit {
            weights: Vec::new(),
            bias: 0.0,
            iterations: 0,
            converged: false,
        },
        feature_names,
        fitted_on: rows.iter().map(|r| r.participant_id.clone()).collect(),
    };
    let x = rows.iter().map(|r| stack.features(r)).collect::<Result<Vec<_>>>()?;
    let y: Vec<u8> = rows.iter().map(|r| r.label).collect();
    stack.model = fit_meta(config.kind, &x, &y, &config.params)?;
    Ok(stack)
}

/// Logit on the top-`k` traits only; predictions are a function of the participant.
pub fn baseline_trait_only(rows: &[StackRow], scales: &[ScaleId], k: usize, base: &StackConfig) -> Result<StackModel> {
    let config = StackConfig {
        kind: MetaKind::Logit,
        k,
        include_tl: false,
        ..base.clone()
    };
    fit_stack(rows, scales, &config)
}

/// Independent fair-coin class draws.
pub fn baseline_random(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<bool>() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pid: &str, label: u8, sias: f64, bfne: f64) -> StackRow {
        StackRow {
            participant_id: pid.into(),
            ema_timestamp: 0.0,
            label,
            tl_probability: Some(0.5),
            tl_fold_id: Some(0),
            traits: TraitProfile {
                participant_id: pid.into(),
                scores: [(ScaleId::Sias, sias), (ScaleId::Bfne, bfne)].into_iter().collect(),
            },
        }
    }

    #[test]
    fn equal_gains_break_ties_by_scale_id() {
        let rows = vec![row("a", 0, 1.0, 1.0), row("b", 1, 1.0, 1.0)];
        let rep = select_traits(&rows, &[ScaleId::Sias, ScaleId::Bfne], 1, 10, SelectionLevel::Ema);
        assert_eq!(rep.selected, vec![ScaleId::Bfne]);
    }

    #[test]
    fn informative_trait_ranks_first() {
        let rows: Vec<StackRow> = (0..40)
            .map(|i| {
                let y = (i % 2) as u8;
                row(&format!("p{i}"), y, y as f64 * 10.0 + (i % 3) as f64, (i % 7) as f64)
            })
            .collect();
        let rep = select_traits(&rows, &[ScaleId::Sias, ScaleId::Bfne], 2, 10, SelectionLevel::Ema);
        assert_eq!(rep.selected[0], ScaleId::Sias);
        assert!(rep.gains.values().all(|&g| g >= 0.0));
    }

    #[test]
    fn trait_only_predictions_are_constant_per_participant() {
        let mut rows = Vec::new();
        for p in 0..6 {
            for e in 0..5 {
                rows.push(row(&format!("p{p}"), ((p + e) % 2) as u8, p as f64, (p * p) as f64));
            }
        }
        let m = baseline_trait_only(&rows, &[ScaleId::Sias, ScaleId::Bfne], 2, &StackConfig::default()).unwrap();
        for p in 0..6 {
            let preds: BTreeSet<u64> = rows
                .iter()
                .filter(|r| r.participant_id == format!("p{p}"))
                .map(|r| m.predict(r).unwrap().0.to_bits())
                .collect();
            assert_eq!(preds.len(), 1);
        }
    }

    #[test]
    fn random_baseline_is_seeded() {
        assert_eq!(baseline_random(50, 9), baseline_random(50, 9));
        assert_ne!(baseline_random(50, 9), baseline_random(50, 10));
    }
}
