//! Signal and survey preprocessing: plausibility filter, R-R interval series,
//! EMA-anchored windows and trait scoring.

mod traits;
mod windows;

use serde::{Deserialize, Serialize};

use crate::data::HrSample;
use crate::error::{Error, Result};

pub use traits::impute_and_score_traits;
pub use windows::{
    extract_all_windows, extract_windows, LabeledWindow, WindowExtraction, WindowSpec,
};

/// Lowest plausible heart rate, in bpm.
pub const HR_FLOOR_BPM: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<HrSample>,
    pub rejected: usize,
}

/// Keeps samples with `40 <= hr <= 220 - age`, preserving order.
pub fn filter_plausible(samples: &[HrSample], age: u32) -> FilterOutcome {
    let ceiling = 220.0 - f64::from(age);
    let kept: Vec<HrSample> = samples
        .iter()
        .copied()
        .filter(|s| s.hr >= HR_FLOOR_BPM && s.hr <= ceiling)
        .collect();
    FilterOutcome {
        rejected: samples.len() - kept.len(),
        kept,
    }
}

/// R-R interval in seconds for a heart rate in beats per minute: `60 / hr`.
pub fn hr_to_rri(hr_bpm: f64) -> Result<f64> {
    if hr_bpm > 0.0 && hr_bpm.is_finite() {
        Ok(60.0 / hr_bpm)
    } else {
        Err(Error::InvalidInput(format!("heart rate must be positive, got {hr_bpm}")))
    }
}

/// Inverse of [`hr_to_rri`].
pub fn rri_to_hr(rri_s: f64) -> f64 {
    60.0 / rri_s
}

/// Tachogram with cumulative-sum timestamps: `t[k] = rri[0] + ... + rri[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RriSeries {
    pub rri: Vec<f64>,
    pub t: Vec<f64>,
}

impl RriSeries {
    pub fn len(&self) -> usize {
        self.rri.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rri.is_empty()
    }
}

/// Converts filtered samples into an RRI series. Wall-clock timestamps are not used
/// inside the series; they only anchor the window.
pub fn build_rri_series(samples: &[HrSample]) -> Result<RriSeries> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot build an RRI series from no samples".into()));
    }
    let rri = samples
        .iter()
        .map(|s| hr_to_rri(s.hr))
        .collect::<Result<Vec<f64>>>()?;
    let mut acc = 0.0;
    let t = rri
        .iter()
        .map(|r| {
            acc += r;
            acc
        })
        .collect();
    Ok(RriSeries { rri, t })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(hr: &[f64]) -> Vec<HrSample> {
        hr.iter()
            .enumerate()
            .map(|(i, &hr)| HrSample { timestamp: i as f64, hr })
            .collect()
    }

    #[test]
    fn filter_uses_age_ceiling() {
        let out = filter_plausible(&samples(&[39.0, 40.0, 120.0, 201.0]), 20);
        let kept: Vec<f64> = out.kept.iter().map(|s| s.hr).collect();
        assert_eq!(kept, vec![40.0, 120.0]);
        assert_eq!(out.rejected, 2);
        let edge = filter_plausible(&samples(&[200.0]), 20);
        assert_eq!(edge.kept.len(), 1);
    }

    #[test]
    fn filter_keeps_plausible_input() {
        let input = samples(&[75.0; 10]);
        assert_eq!(filter_plausible(&input, 20).kept, input);
    }

    #[test]
    fn rri_formula_points() {
        assert_eq!(hr_to_rri(60.0).unwrap(), 1.0);
        assert_eq!(hr_to_rri(120.0).unwrap(), 0.5);
        assert_eq!(hr_to_rri(75.0).unwrap(), 0.8);
        assert!(hr_to_rri(0.0).is_err());
        assert!(hr_to_rri(-3.0).is_err());
    }

    #[test]
    fn rri_series_cumulative_timestamps() {
        let s = build_rri_series(&samples(&[60.0, 120.0, 60.0])).unwrap();
        assert_eq!(s.rri, vec![1.0, 0.5, 1.0]);
        assert_eq!(s.t, vec![1.0, 1.5, 2.5]);
        let one = build_rri_series(&samples(&[100.0])).unwrap();
        assert_eq!(one.rri, vec![0.6]);
        assert_eq!(one.t, vec![0.6]);
        assert!(build_rri_series(&[]).is_err());
    }
}
