use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Confusion::default();
        for (truth, pred) in pairs {
            match (truth == 1, pred == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    /// Class-1 recall (sensitivity).
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.positives())
    }

    /// Class-0 recall.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.negatives())
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.recall() + self.specificity()) / 2.0
    }

    /// Balanced accuracy where a missing class contributes nothing: a participant
    /// with only one true class scores that class's recall.
    pub fn one_sided_balanced_accuracy(&self) -> f64 {
        match (self.positives() > 0, self.negatives() > 0) {
            (true, true) => self.balanced_accuracy(),
            (true, false) => self.recall(),
            (false, true) => self.specificity(),
            (false, false) => 0.0,
        }
    }

    /// Per-class precision `[class 0, class 1]`.
    pub fn precision_per_class(&self) -> [f64; 2] {
        [ratio(self.tn, self.tn + self.fn_), ratio(self.tp, self.tp + self.fp)]
    }

    /// Support-weighted precision.
    pub fn weighted_precision(&self) -> f64 {
        let n = self.total() as f64;
        let [p0, p1] = self.precision_per_class();
        if n == 0.0 {
            return 0.0;
        }
        (self.negatives() as f64 * p0 + self.positives() as f64 * p1) / n
    }

    /// Support-weighted F1.
    pub fn weighted_f1(&self) -> f64 {
        let n = self.total() as f64;
        let [p0, p1] = self.precision_per_class();
        if n == 0.0 {
            return 0.0;
        }
        (self.negatives() as f64 * f1(p0, self.specificity()) + self.positives() as f64 * f1(p1, self.recall())) / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScore {
    pub participant_id: String,
    pub n: usize,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Distribution {
            mean,
            sd,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Metrics as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub balanced_accuracy: f64,
    pub recall: f64,
    pub specificity: f64,
    pub weighted_precision: f64,
    pub weighted_f1: f64,
    pub confusion: Confusion,
    pub per_participant: Vec<ParticipantScore>,
    pub per_participant_summary: Option<Distribution>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        MetricsReport {
            n: confusion.total(),
            balanced_accuracy: confusion.balanced_accuracy(),
            recall: confusion.recall(),
            specificity: confusion.specificity(),
            weighted_precision: confusion.weighted_precision(),
            weighted_f1: confusion.weighted_f1(),
            confusion,
            per_participant: Vec::new(),
            per_participant_summary: None,
        }
    }
}

pub fn compute_metrics(records: &[PredictionRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no prediction records to score".into()));
    }
    let confusion = Confusion::from_pairs(records.iter().map(|r| (r.label, r.predicted_class)));
    let mut by: BTreeMap<&str, Vec<(u8, u8)>> = BTreeMap::new();
    for r in records {
        by.entry(&r.participant_id).or_default().push((r.label, r.predicted_class));
    }
    let per_participant: Vec<ParticipantScore> = by
        .into_iter()
        .map(|(p, pairs)| ParticipantScore {
            participant_id: p.to_string(),
            n: pairs.len(),
            balanced_accuracy: Confusion::from_pairs(pairs).one_sided_balanced_accuracy(),
        })
        .collect();
    let bas: Vec<f64> = per_participant.iter().map(|p| p.balanced_accuracy).collect();
    Ok(MetricsReport {
        per_participant_summary: Distribution::of(&bas),
        per_participant,
        ..MetricsReport::from_confusion(confusion)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rates_fixture() {
        let c = Confusion {
            tp: 581,
            fn_: 419,
            tn: 627,
            fp: 373,
        };
        assert!((c.recall() - 0.581).abs() < 1e-12);
        assert!((c.specificity() - 0.627).abs() < 1e-12);
        assert!((c.balanced_accuracy() - 0.604).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let c = Confusion {
            tp: 3,
            fn_: 0,
            tn: 4,
            fp: 0,
        };
        let m = MetricsReport::from_confusion(c);
        for v in [m.balanced_accuracy, m.recall, m.specificity, m.weighted_precision, m.weighted_f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn one_sided_participant_scores() {
        let all_neg_right = Confusion::from_pairs([(0, 0), (0, 0)]);
        let all_neg_wrong = Confusion::from_pairs([(0, 1), (0, 1)]);
        let mixed_const = Confusion::from_pairs([(0, 1), (1, 1)]);
        assert_eq!(all_neg_right.one_sided_balanced_accuracy(), 1.0);
        assert_eq!(all_neg_wrong.one_sided_balanced_accuracy(), 0.0);
        assert_eq!(mixed_const.one_sided_balanced_accuracy(), 0.5);
    }
}
