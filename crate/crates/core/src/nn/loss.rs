//! Sigmoid output and class-weighted binary focal loss.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Probabilities are kept in `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Clamped logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    let p = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    clamp_prob(p)
}

pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::lit(PROB_EPS);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossParams<T> {
    pub gamma: T,
    pub w0: T,
    pub w1: T,
}

impl<T: Scalar> Default for FocalLossParams<T> {
    fn default() -> Self {
        FocalLossParams {
            gamma: T::lit(2.0),
            w0: T::one(),
            w1: T::one(),
        }
    }
}

impl<T: Scalar> FocalLossParams<T> {
    /// Plain binary cross-entropy.
    pub fn cross_entropy() -> Self {
        FocalLossParams {
            gamma: T::zero(),
            w0: T::one(),
            w1: T::one(),
        }
    }

    /// `w_c = N / (2 N_c)`; a class absent from `labels` gets weight 1.
    pub fn inverse_frequency(gamma: T, labels: &[u8]) -> Self {
        let n = labels.len();
        let n1 = labels.iter().filter(|&&y| y == 1).count();
        let w = |nc: usize| {
            if nc == 0 {
                T::one()
            } else {
                T::from_count(n) / T::from_count(2 * nc)
            }
        };
        FocalLossParams {
            gamma,
            w0: w(n - n1),
            w1: w(n1),
        }
    }
}

/// Mean loss over a batch and the gradient of that mean with respect to each logit.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalOutput<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Loss of one sample at probability `p`.
pub fn focal_term<T: Scalar>(p: T, y: u8, params: &FocalLossParams<T>) -> T {
    let p = clamp_prob(p);
    if y == 1 {
        -params.w1 * (T::one() - p).powf(params.gamma) * p.ln()
    } else {
        -params.w0 * p.powf(params.gamma) * (T::one() - p).ln()
    }
}

/// Derivative of [`focal_term`] with respect to the logit behind `p`.
/// Zero when `p` sits on the clamp boundary.
pub fn focal_term_grad<T: Scalar>(p: T, y: u8, params: &FocalLossParams<T>) -> T {
    let lo = T::lit(PROB_EPS);
    if p <= lo || p >= T::one() - lo {
        return T::zero();
    }
    let q = T::one() - p;
    let g = params.gamma;
    if y == 1 {
        params.w1 * q.powf(g) * (g * p * p.ln() - q)
    } else {
        params.w0 * p.powf(g) * (p - g * q * q.ln())
    }
}

/// Focal loss for probabilities `probs` (already passed through [`sigmoid`]).
pub fn focal_loss<T: Scalar>(probs: &[T], labels: &[u8], params: &FocalLossParams<T>) -> FocalOutput<T> {
    assert_eq!(probs.len(), labels.len(), "one label per probability");
    let n = T::from_count(probs.len().max(1));
    let loss = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_term(p, y, params))
        .sum::<T>()
        / n;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_term_grad(p, y, params) / n)
        .collect();
    FocalOutput { loss, grad }
}

/// Focal loss evaluated directly on logits.
pub fn focal_loss_logits<T: Scalar>(logits: &[T], labels: &[u8], params: &FocalLossParams<T>) -> FocalOutput<T> {
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    focal_loss(&probs, labels, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_at_half() {
        let out = focal_loss(&[0.5f64], &[1], &FocalLossParams::cross_entropy());
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_has_small_loss() {
        for gamma in [0.0, 1.0, 2.0, 5.0] {
            let p = FocalLossParams {
                gamma,
                w0: 1.0,
                w1: 1.0,
            };
            assert!(focal_term(1.0 - 1e-7, 1, &p) < 1.1e-7);
        }
    }

    #[test]
    fn sigmoid_is_clamped_and_symmetric() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(1000.0f64), 1.0 - PROB_EPS);
        assert_eq!(sigmoid(-1000.0f64), PROB_EPS);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_frequency_weights() {
        let labels = [1, 0, 0, 0];
        let p = FocalLossParams::<f64>::inverse_frequency(2.0, &labels);
        assert_eq!(p.w1, 2.0);
        assert!((p.w0 - 4.0 / 6.0).abs() < 1e-15);
        let single = FocalLossParams::<f64>::inverse_frequency(2.0, &[0, 0]);
        assert_eq!((single.w0, single.w1), (0.5, 1.0));
    }

    #[test]
    fn gradient_matches_central_difference_in_logit() {
        let params = FocalLossParams {
            gamma: 2.0,
            w0: 0.8,
            w1: 1.3,
        };
        for &z in &[-3.0f64, -0.4, 0.0, 0.7, 2.5] {
            for y in [0u8, 1] {
                let h = 1e-5;
                let f = |z: f64| focal_term(sigmoid(z), y, &params);
                let fd = (f(z + h) - f(z - h)) / (2.0 * h);
                let an = focal_term_grad(sigmoid(z), y, &params);
                assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()), "z={z} y={y}: {fd} vs {an}");
            }
        }
    }
}
