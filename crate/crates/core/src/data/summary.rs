use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Dataset;

/// Descriptive statistics of a dataset, in the form a study report would quote them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub participants: usize,
    /// Distinct (participant, UTC day) pairs with at least one heart-rate sample.
    pub participant_days: usize,
    pub probes: usize,
    pub hr_samples: usize,
    pub emas: usize,
    pub mean_emas_per_participant: f64,
    /// Sample standard deviation (n - 1); zero for a single participant.
    pub sd_emas_per_participant: f64,
    pub class1_proportion: f64,
    pub class0_proportion: f64,
}

pub fn dataset_summary(ds: &Dataset) -> DatasetSummary {
    let mut days = BTreeSet::new();
    let mut probes = 0;
    let mut hr_samples = 0;
    for p in &ds.participants {
        probes += p.probes.len();
        for probe in &p.probes {
            hr_samples += probe.samples.len();
            for s in &probe.samples {
                days.insert((p.id.as_str(), (s.timestamp / 86_400.0).floor() as i64));
            }
        }
    }
    let counts: Vec<f64> = ds.participants.iter().map(|p| p.emas.len() as f64).collect();
    let n = counts.len() as f64;
    let mean = if counts.is_empty() { 0.0 } else { counts.iter().sum::<f64>() / n };
    let sd = if counts.len() < 2 {
        0.0
    } else {
        (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let emas = ds.ema_count();
    let positives = ds
        .participants
        .iter()
        .flat_map(|p| &p.emas)
        .filter(|e| e.label() == 1)
        .count();
    let class1 = if emas == 0 { 0.0 } else { positives as f64 / emas as f64 };
    DatasetSummary {
        participants: ds.participants.len(),
        participant_days: days.len(),
        probes,
        hr_samples,
        emas,
        mean_emas_per_participant: mean,
        sd_emas_per_participant: sd,
        class1_proportion: class1,
        class0_proportion: if emas == 0 { 0.0 } else { 1.0 - class1 },
    }
}
