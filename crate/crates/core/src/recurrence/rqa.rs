use serde::{Deserialize, Serialize};

use super::RecurrenceMatrix;
use crate::error::{Error, Result};

/// Minimum diagonal and vertical line length.
pub const MIN_LINE: usize = 2;

/// Line-structure statistics of a recurrence matrix.
///
/// The main diagonal (line of identity) is excluded from every statistic. DET and LAM
/// are zero when there are no off-diagonal recurrences; `avg_diagonal` and
/// `max_diagonal` are zero when no diagonal line reaches [`MIN_LINE`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RqaMeasures {
    pub recurrence_rate: f64,
    pub determinism: f64,
    pub laminarity: f64,
    pub avg_diagonal: f64,
    pub max_diagonal: usize,
}

/// Run lengths of consecutive `true` values.
fn runs(cells: impl Iterator<Item = bool>, mut visit: impl FnMut(usize)) {
    let mut run = 0;
    for c in cells {
        if c {
            run += 1;
        } else if run > 0 {
            visit(run);
            run = 0;
        }
    }
    if run > 0 {
        visit(run);
    }
}

pub fn rqa_measures(m: &RecurrenceMatrix) -> Result<RqaMeasures> {
    let n = m.n();
    if n < 2 {
        return Err(Error::InvalidInput(format!("RQA needs n >= 2, got {n}")));
    }
    let recurrent = m.recurrent_off_diagonal();

    let mut diag_points = 0usize;
    let mut diag_lines = 0usize;
    let mut max_diagonal = 0usize;
    // Upper triangle only; the matrix is symmetric, so each line has a mirror image
    // and the ratios are unchanged.
    for k in 1..n {
        runs((0..n - k).map(|i| m.get(i, i + k)), |len| {
            if len >= MIN_LINE {
                diag_points += len;
                diag_lines += 1;
                max_diagonal = max_diagonal.max(len);
            }
        });
    }

    let mut vert_points = 0usize;
    for j in 0..n {
        runs((0..n).map(|i| i != j && m.get(i, j)), |len| {
            if len >= MIN_LINE {
                vert_points += len;
            }
        });
    }

    let (determinism, laminarity) = if recurrent == 0 {
        (0.0, 0.0)
    } else {
        (
            (2 * diag_points) as f64 / recurrent as f64,
            vert_points as f64 / recurrent as f64,
        )
    };
    Ok(RqaMeasures {
        recurrence_rate: m.recurrence_rate(),
        determinism,
        laminarity,
        avg_diagonal: if diag_lines == 0 {
            0.0
        } else {
            diag_points as f64 / diag_lines as f64
        },
        max_diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones() {
        let m = RecurrenceMatrix::from_fn(5, |_, _| true);
        let q = rqa_measures(&m).unwrap();
        assert_eq!(q.recurrence_rate, 1.0);
        // the two corner cells (0,4) and (4,0) sit on length-1 diagonals
        assert_eq!(q.determinism, 18.0 / 20.0);
        // columns 1 and 3 are split by the diagonal into a length-1 and a length-3 run
        assert_eq!(q.laminarity, 18.0 / 20.0);
        assert_eq!(q.max_diagonal, 4);
        assert_eq!(q.avg_diagonal, (4 + 3 + 2) as f64 / 3.0);
    }

    #[test]
    fn identity_has_no_structure() {
        let m = RecurrenceMatrix::from_fn(6, |_, _| false);
        let q = rqa_measures(&m).unwrap();
        assert_eq!(q.recurrence_rate, 0.0);
        assert_eq!(q.determinism, 0.0);
        assert_eq!(q.laminarity, 0.0);
        assert_eq!(q.max_diagonal, 0);
    }

    #[test]
    fn single_off_diagonal_line() {
        let m = RecurrenceMatrix::from_fn(6, |i, j| j == i + 1);
        let q = rqa_measures(&m).unwrap();
        assert_eq!(q.determinism, 1.0);
        assert_eq!(q.max_diagonal, 5);
        assert_eq!(q.laminarity, 0.0);
    }

    #[test]
    fn tiny_matrix_rejected() {
        assert!(rqa_measures(&RecurrenceMatrix::from_fn(1, |_, _| true)).is_err());
    }
}
