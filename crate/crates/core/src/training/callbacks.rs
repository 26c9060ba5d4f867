use serde::{Deserialize, Serialize};

/// How the head-tuning tolerance compares validation and training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceMode {
    /// `(val - train) / train > tolerance`.
    Relative,
    /// `val - train > tolerance`.
    Absolute,
}

/// Chooses an epoch from `(train_loss, val_loss)` pairs.
///
/// With `d = val - train`: if some epoch has `val < train` or exceeds the tolerance,
/// the epoch with the smallest `|d|` is returned (earliest on ties); otherwise the
/// last epoch. `None` for an empty trace.
pub fn custom_restore(losses: &[(f64, f64)], tolerance: f64, mode: ToleranceMode) -> Option<usize> {
    if losses.is_empty() {
        return None;
    }
    let exceeds = |&(t, v): &(f64, f64)| {
        let d = v - t;
        match mode {
            ToleranceMode::Relative => d / t > tolerance,
            ToleranceMode::Absolute => d > tolerance,
        }
    };
    let triggered = losses.iter().any(|e| e.1 < e.0 || exceeds(e));
    if !triggered {
        return Some(losses.len() - 1);
    }
    let mut best = 0;
    for (i, &(t, v)) in losses.iter().enumerate() {
        if (v - t).abs() < (losses[best].1 - losses[best].0).abs() {
            best = i;
        }
    }
    Some(best)
}

/// Patience-based stopping on validation loss (strict improvement resets the count).
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            wait: 0,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn update(&mut self, val_loss: f64) -> bool {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }

    /// 1-based epoch with the lowest validation loss so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_example() {
        let mut s = EarlyStopping::new(3);
        let stops: Vec<bool> = [0.7, 0.6, 0.61, 0.62, 0.63].iter().map(|&v| s.update(v)).collect();
        assert_eq!(stops, [false, false, false, false, true]);
        assert_eq!(s.best_epoch(), 2);
    }

    #[test]
    fn within_tolerance_keeps_last_epoch() {
        let trace = [(1.0, 1.01), (0.9, 0.92), (0.8, 0.82)];
        assert_eq!(custom_restore(&trace, 0.03, ToleranceMode::Relative), Some(2));
    }

    #[test]
    fn dip_below_training_loss_picks_smallest_gap() {
        let trace = [(1.0, 1.02), (0.9, 0.92), (0.8, 0.75), (0.7, 0.705), (0.6, 0.62)];
        assert_eq!(custom_restore(&trace, 0.03, ToleranceMode::Relative), Some(3));
    }

    #[test]
    fn absolute_mode_differs_from_relative() {
        let trace = [(0.1, 0.12), (0.1, 0.125)];
        assert_eq!(custom_restore(&trace, 0.03, ToleranceMode::Absolute), Some(1));
        assert_eq!(custom_restore(&trace, 0.03, ToleranceMode::Relative), Some(0));
    }
}
