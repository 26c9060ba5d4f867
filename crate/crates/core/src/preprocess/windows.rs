use serde::{Deserialize, Serialize};

use super::{build_rri_series, filter_plausible, RriSeries};
use crate::data::{Dataset, HrSample, Participant};
use crate::error::{Error, Result};

/// Look-back window before each EMA and the minimum sample count to keep it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub length_s: f64,
    pub min_samples: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            length_s: 5400.0,
            min_samples: 50,
        }
    }
}

impl WindowSpec {
    pub fn new(length_s: f64, min_samples: usize) -> Result<Self> {
        let spec = WindowSpec { length_s, min_samples };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_s > 0.0 && self.length_s.is_finite()) {
            return Err(Error::InvalidConfig(format!("window length {} must be positive", self.length_s)));
        }
        if self.min_samples < 2 {
            return Err(Error::InvalidConfig("min_samples must be at least 2".into()));
        }
        Ok(())
    }

    /// Human label such as `1.5h`.
    pub fn label(&self) -> String {
        format!("{}h", self.length_s / 3600.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub participant_id: String,
    pub ema_timestamp: f64,
    pub label: u8,
    pub rri_series: RriSeries,
    pub window: WindowSpec,
}

/// Per-EMA counts, kept both before and after the plausibility filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaWindowCount {
    pub ema_timestamp: f64,
    pub raw_samples: usize,
    pub plausible_samples: usize,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowExtraction {
    pub windows: Vec<LabeledWindow>,
    pub excluded: usize,
    pub counts: Vec<EmaWindowCount>,
    pub rejected_samples: usize,
}

impl WindowExtraction {
    pub fn inclusion_rate(&self) -> f64 {
        let total = self.windows.len() + self.excluded;
        if total == 0 {
            0.0
        } else {
            self.windows.len() as f64 / total as f64
        }
    }
}

fn samples_in(sorted: &[HrSample], from: f64, to: f64) -> &[HrSample] {
    let lo = sorted.partition_point(|s| s.timestamp < from);
    let hi = sorted.partition_point(|s| s.timestamp <= to);
    &sorted[lo..hi.max(lo)]
}

/// Builds one window per EMA from the plausible samples in `[ema - length, ema]`.
///
/// Samples from all probes inside the window are concatenated in time order. EMAs with
/// fewer than `min_samples` plausible samples are excluded and counted.
pub fn extract_windows(participant: &Participant, spec: WindowSpec) -> WindowExtraction {
    let mut raw: Vec<HrSample> = participant
        .probes
        .iter()
        .flat_map(|p| p.samples.iter().copied())
        .collect();
    raw.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let filtered = filter_plausible(&raw, participant.age);

    let mut out = WindowExtraction {
        rejected_samples: filtered.rejected,
        ..WindowExtraction::default()
    };
    let mut emas: Vec<_> = participant.emas.iter().collect();
    emas.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    for ema in emas {
        let from = ema.timestamp - spec.length_s;
        let raw_count = samples_in(&raw, from, ema.timestamp).len();
        let window = samples_in(&filtered.kept, from, ema.timestamp);
        let included = window.len() >= spec.min_samples;
        out.counts.push(EmaWindowCount {
            ema_timestamp: ema.timestamp,
            raw_samples: raw_count,
            plausible_samples: window.len(),
            included,
        });
        if !included {
            out.excluded += 1;
            continue;
        }
        let rri_series = build_rri_series(window).expect("window holds at least two samples");
        out.windows.push(LabeledWindow {
            participant_id: participant.id.clone(),
            ema_timestamp: ema.timestamp,
            label: ema.label(),
            rri_series,
            window: spec,
        });
    }
    out
}

/// Extracts windows for every participant, ordered by participant id then EMA time.
pub fn extract_all_windows(ds: &Dataset, spec: WindowSpec) -> Vec<(String, WindowExtraction)> {
    use rayon::prelude::*;
    let mut ids: Vec<&Participant> = ds.participants.iter().collect();
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    ids.par_iter()
        .map(|p| (p.id.clone(), extract_windows(p, spec)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmaResponse, Probe, TraitProfile};

    fn participant(probe_starts: &[f64], ema_times: &[f64]) -> Participant {
        let probes = probe_starts
            .iter()
            .enumerate()
            .map(|(i, &start)| Probe {
                probe_id: format!("p{i}"),
                participant_id: "A".into(),
                samples: (0..60)
                    .map(|k| HrSample {
                        timestamp: start + k as f64,
                        hr: 70.0 + (k % 7) as f64,
                    })
                    .collect(),
            })
            .collect();
        Participant {
            id: "A".into(),
            age: 20,
            age_defaulted: false,
            traits: TraitProfile {
                participant_id: "A".into(),
                scores: Default::default(),
            },
            items: vec![],
            probes,
            emas: ema_times
                .iter()
                .map(|&t| EmaResponse::new("A", t, 3, 10).unwrap())
                .collect(),
        }
    }

    #[test]
    fn full_probe_ten_minutes_earlier_is_included() {
        let p = participant(&[10_000.0], &[10_000.0 + 600.0]);
        let out = extract_windows(&p, WindowSpec::default());
        assert_eq!(out.windows.len(), 1);
        assert_eq!(out.windows[0].rri_series.len(), 60);
        assert_eq!(out.windows[0].label, 1);
    }

    #[test]
    fn empty_window_is_excluded() {
        let p = participant(&[10_000.0], &[30_000.0]);
        let out = extract_windows(&p, WindowSpec::default());
        assert!(out.windows.is_empty());
        assert_eq!(out.excluded, 1);
    }

    #[test]
    fn samples_after_ema_are_not_used() {
        // probe straddles the EMA: only the 31 samples at or before it count
        let p = participant(&[10_000.0], &[10_030.0]);
        let out = extract_windows(&p, WindowSpec::new(5400.0, 30).unwrap());
        assert_eq!(out.windows[0].rri_series.len(), 31);
        assert_eq!(out.counts[0].raw_samples, 31);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(WindowSpec::new(0.0, 50).is_err());
        assert!(WindowSpec::new(3600.0, 1).is_err());
    }
}
