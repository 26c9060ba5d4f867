//! Time-delay embedding, recurrence matrices, recurrence-plot images and RQA measures.

mod export;
mod featurize;
mod rqa;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use export::{write_pgm, write_png};
pub use featurize::{featurize_window, featurize_windows, FeaturizedWindow};
pub use rqa::{rqa_measures, RqaMeasures, MIN_LINE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Threshold {
    /// Recur when the distance is at most `epsilon`.
    Fixed { epsilon: f64 },
    /// Pick epsilon as the quantile of off-diagonal distances giving this recurrence rate.
    TargetRate { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingParams {
    pub dimension: usize,
    pub delay: usize,
    pub threshold: Threshold,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        EmbeddingParams {
            dimension: 3,
            delay: 1,
            threshold: Threshold::TargetRate { rate: 0.10 },
        }
    }
}

impl EmbeddingParams {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.delay == 0 {
            return Err(Error::InvalidConfig("embedding dimension and delay must be >= 1".into()));
        }
        match self.threshold {
            Threshold::TargetRate { rate } if !(rate > 0.0 && rate < 1.0) => Err(
                Error::InvalidConfig(format!("target recurrence rate {rate} must lie in (0, 1)")),
            ),
            Threshold::Fixed { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => Err(
                Error::InvalidConfig(format!("fixed epsilon {epsilon} must be non-negative")),
            ),
            _ => Ok(()),
        }
    }

    /// Minimum series length that yields at least one embedded point.
    pub fn span(&self) -> usize {
        (self.dimension - 1) * self.delay + 1
    }
}

/// Delay-embedded points stored row-major, `dimension` values per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub dimension: usize,
    pub coords: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn len(&self) -> usize {
        self.coords.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.dimension..(i + 1) * self.dimension]
    }

    fn sq_dist(&self, i: usize, j: usize) -> T {
        self.point(i)
            .iter()
            .zip(self.point(j))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    }
}

/// `x_i = (s[i], s[i + delay], ..., s[i + (m - 1) delay])` for every admissible `i`.
pub fn embed<T: Scalar>(series: &[T], params: &EmbeddingParams) -> Result<Embedding<T>> {
    params.validate()?;
    let span = params.span();
    if series.len() < span {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            dimension: params.dimension,
            delay: params.delay,
        });
    }
    let n = series.len() - (span - 1);
    let mut coords = Vec::with_capacity(n * params.dimension);
    for i in 0..n {
        for k in 0..params.dimension {
            coords.push(series[i + k * params.delay]);
        }
    }
    Ok(Embedding {
        dimension: params.dimension,
        coords,
    })
}

/// Symmetric binary matrix with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecurrenceMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl RecurrenceMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
            for j in i + 1..n {
                let v = f(i, j);
                bits[i * n + j] = v;
                bits[j * n + i] = v;
            }
        }
        RecurrenceMatrix { n, bits }
    }

    /// Wraps raw bits. Panics unless the matrix is square, symmetric and has a unit diagonal.
    pub fn from_bits(n: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), n * n, "bit count must be n*n");
        for i in 0..n {
            assert!(bits[i * n + i], "diagonal must be recurrent");
            for j in 0..i {
                assert_eq!(bits[i * n + j], bits[j * n + i], "matrix must be symmetric");
            }
        }
        RecurrenceMatrix { n, bits }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn recurrent_off_diagonal(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count() - self.n
    }

    pub fn recurrence_rate(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.recurrent_off_diagonal() as f64 / (self.n * (self.n - 1)) as f64
    }
}

/// Result of thresholding an embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceOutcome {
    pub matrix: RecurrenceMatrix,
    pub epsilon: f64,
    /// All points coincide in target mode; epsilon is 0 and the matrix is all ones.
    pub degenerate: bool,
    /// Off-diagonal pairs whose distance equals epsilon exactly (ties inflate the rate).
    pub ties_at_threshold: usize,
}

pub fn recurrence_matrix<T: Scalar>(
    points: &Embedding<T>,
    params: &EmbeddingParams,
) -> Result<RecurrenceOutcome> {
    params.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 embedded points, got {n}")));
    }
    let pairs = n * (n - 1) / 2;
    let mut upper = Vec::with_capacity(pairs);
    for i in 0..n {
        for j in i + 1..n {
            upper.push(points.sq_dist(i, j));
        }
    }
    let (eps_sq, degenerate) = match params.threshold {
        Threshold::Fixed { epsilon } => {
            let e = T::lit(epsilon);
            (e * e, false)
        }
        Threshold::TargetRate { rate } => {
            let max = upper.iter().copied().fold(T::zero(), T::max);
            if max == T::zero() {
                (T::zero(), true)
            } else {
                let k = (rate * pairs as f64).round() as usize;
                if k == 0 {
                    (T::lit(-1.0), false)
                } else {
                    let mut scratch = upper.clone();
                    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| {
                        a.partial_cmp(b).expect("distances are finite")
                    });
                    (*kth, false)
                }
            }
        }
    };
    let mut idx = 0;
    let mut ties: usize = 0;
    let mut bits = vec![false; n * n];
    for i in 0..n {
        bits[i * n + i] = true;
        for j in i + 1..n {
            let d = upper[idx];
            idx += 1;
            if d <= eps_sq {
                bits[i * n + j] = true;
                bits[j * n + i] = true;
                if d == eps_sq {
                    ties += 1;
                }
            }
        }
    }
    Ok(RecurrenceOutcome {
        matrix: RecurrenceMatrix { n, bits },
        epsilon: if eps_sq < T::zero() { 0.0 } else { eps_sq.sqrt().as_f64() },
        degenerate,
        ties_at_threshold: match params.threshold {
            Threshold::TargetRate { .. } if !degenerate => ties.saturating_sub(1),
            _ => ties,
        },
    })
}

/// Square image with pixel values in {0, 1}, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrencePlot<T> {
    pub side: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> RecurrencePlot<T> {
    pub fn pixel(&self, row: usize, col: usize) -> T {
        self.pixels[row * self.side + col]
    }

    /// Repeats the single plane `channels` times, giving a `(channels, side, side)` layout.
    pub fn to_channels(&self, channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(channels * self.pixels.len());
        for _ in 0..channels {
            out.extend_from_slice(&self.pixels);
        }
        out
    }
}

/// Nearest-neighbour resampling of the matrix onto a `side x side` grid:
/// pixel `(a, b)` takes entry `(a n / side, b n / side)` (integer division).
pub fn rasterize<T: Scalar>(matrix: &RecurrenceMatrix, side: usize) -> RecurrencePlot<T> {
    let n = matrix.n();
    let map = |a: usize| a * n / side;
    let mut pixels = Vec::with_capacity(side * side);
    for a in 0..side {
        let i = map(a);
        for b in 0..side {
            pixels.push(if matrix.get(i, map(b)) { T::one() } else { T::zero() });
        }
    }
    RecurrencePlot { side, pixels }
}

/// Embedding, thresholding and rasterisation in one step.
pub fn recurrence_plot<T: Scalar>(
    series: &[f64],
    params: &EmbeddingParams,
    side: usize,
) -> Result<(RecurrencePlot<T>, RecurrenceOutcome)> {
    let series: Vec<T> = series.iter().map(|&x| T::lit(x)).collect();
    let points = embed(&series, params)?;
    let outcome = recurrence_matrix(&points, params)?;
    Ok((rasterize(&outcome.matrix, side), outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(epsilon: f64, m: usize) -> EmbeddingParams {
        EmbeddingParams {
            dimension: m,
            delay: 1,
            threshold: Threshold::Fixed { epsilon },
        }
    }

    #[test]
    fn embedding_unrolls_definition() {
        let e = embed(&[1.0, 2.0, 3.0, 4.0], &fixed(0.0, 2)).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e.point(0), &[1.0, 2.0]);
        assert_eq!(e.point(2), &[3.0, 4.0]);
        let id = embed(&[5.0f32, 6.0], &fixed(0.0, 1)).unwrap();
        assert_eq!(id.coords, vec![5.0, 6.0]);
    }

    #[test]
    fn too_short_series_rejected() {
        let p = EmbeddingParams {
            dimension: 3,
            delay: 2,
            ..Default::default()
        };
        assert!(matches!(embed(&[1.0; 4], &p), Err(Error::SeriesTooShort { .. })));
        assert_eq!(embed(&[1.0; 5], &p).unwrap().len(), 1);
    }

    #[test]
    fn constant_series_all_recurrent() {
        let e = embed(&[0.8; 10], &EmbeddingParams::default()).unwrap();
        let out = recurrence_matrix(&e, &EmbeddingParams::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.matrix.recurrence_rate(), 1.0);
        let fixed_out = recurrence_matrix(&e, &fixed(0.0, 3)).unwrap();
        assert_eq!(fixed_out.matrix.recurrence_rate(), 1.0);
    }

    #[test]
    fn distant_points_do_not_recur() {
        let e = embed(&[0.0, 5.0], &fixed(1.0, 1)).unwrap();
        let out = recurrence_matrix(&e, &fixed(1.0, 1)).unwrap();
        assert!(!out.matrix.get(0, 1) && !out.matrix.get(1, 0));
        assert!(out.matrix.get(0, 0) && out.matrix.get(1, 1));
    }

    #[test]
    fn rasterize_identity_and_ones() {
        let m = RecurrenceMatrix::from_fn(4, |i, j| (i + j) % 2 == 0);
        let plot: RecurrencePlot<f64> = rasterize(&m, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(plot.pixel(i, j) == 1.0, m.get(i, j));
            }
        }
        let ones = RecurrenceMatrix::from_fn(100, |_, _| true);
        let p: RecurrencePlot<f32> = rasterize(&ones, 16);
        assert!(p.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = EmbeddingParams {
            threshold: Threshold::TargetRate { rate: 1.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EmbeddingParams { dimension: 0, ..Default::default() }.validate().is_err());
    }
}
