use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{recurrence_plot, rqa_measures, EmbeddingParams, RecurrencePlot, RqaMeasures};
use crate::error::Result;
use crate::preprocess::LabeledWindow;

/// A labeled window turned into a recurrence plot plus its RQA measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedWindow {
    pub participant_id: String,
    pub ema_timestamp: f64,
    pub label: u8,
    pub plot: RecurrencePlot<f64>,
    pub rqa: RqaMeasures,
    pub epsilon: f64,
    pub degenerate: bool,
    pub ties_at_threshold: usize,
}

pub fn featurize_window(w: &LabeledWindow, params: &EmbeddingParams, side: usize) -> Result<FeaturizedWindow> {
    let (plot, outcome) = recurrence_plot::<f64>(&w.rri_series.rri, params, side)?;
    Ok(FeaturizedWindow {
        participant_id: w.participant_id.clone(),
        ema_timestamp: w.ema_timestamp,
        label: w.label,
        rqa: rqa_measures(&outcome.matrix)?,
        plot,
        epsilon: outcome.epsilon,
        degenerate: outcome.degenerate,
        ties_at_threshold: outcome.ties_at_threshold,
    })
}

/// Featurizes windows in parallel; output order follows the input.
pub fn featurize_windows(windows: &[LabeledWindow], params: &EmbeddingParams, side: usize) -> Result<Vec<FeaturizedWindow>> {
    params.validate()?;
    windows.par_iter().map(|w| featurize_window(w, params, side)).collect()
}
