use serde::{Deserialize, Serialize};

/// Equal-frequency bin edges: the sorted values at cut positions `round(k N / bins)`,
/// deduplicated so that tied values always share a bin.
pub fn equal_frequency_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::new();
    for k in 1..bins {
        let cut = ((k * n) as f64 / bins as f64).round() as usize;
        if cut == 0 || cut >= n {
            continue;
        }
        let e = sorted[cut - 1];
        if edges.last() != Some(&e) {
            edges.push(e);
        }
    }
    edges
}

/// Index of the bin holding `x`: the number of edges strictly below it.
pub fn bin_of(x: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e < x)
}

/// Shannon entropy in bits of a two-class count.
pub fn entropy_bits(n0: usize, n1: usize) -> f64 {
    let n = (n0 + n1) as f64;
    [n0, n1]
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainResult {
    pub gain: f64,
    pub edges: Vec<f64>,
    /// The labels held a single class, so the gain is zero by convention.
    pub single_class: bool,
}

/// `H(Y) - sum_b (n_b / N) H(Y | b)` after equal-frequency discretisation.
pub fn information_gain(values: &[f64], labels: &[u8], bins: usize) -> GainResult {
    assert_eq!(values.len(), labels.len());
    let edges = equal_frequency_edges(values, bins.max(1));
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return GainResult {
            gain: 0.0,
            edges,
            single_class: true,
        };
    }
    let mut counts = vec![[0usize; 2]; edges.len() + 1];
    for (&x, &y) in values.iter().zip(labels) {
        counts[bin_of(x, &edges)][(y == 1) as usize] += 1;
    }
    let n = labels.len() as f64;
    let conditional: f64 = counts
        .iter()
        .filter(|c| c[0] + c[1] > 0)
        .map(|c| (c[0] + c[1]) as f64 / n * entropy_bits(c[0], c[1]))
        .sum();
    GainResult {
        gain: (entropy_bits(n0, n1) - conditional).max(0.0),
        edges,
        single_class: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_recovers_label_entropy() {
        let labels = [0, 1, 1, 0, 1, 0, 0, 1];
        let values: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let g = information_gain(&values, &labels, 2);
        assert_eq!(g.gain, 1.0);
    }

    #[test]
    fn ties_are_never_split() {
        let edges = equal_frequency_edges(&[1.0, 1.0, 1.0, 1.0, 2.0, 3.0], 3);
        assert_eq!(edges, vec![1.0]);
        assert_eq!(bin_of(1.0, &edges), 0);
        assert_eq!(bin_of(2.0, &edges), 1);
    }

    #[test]
    fn single_class_is_flagged() {
        let g = information_gain(&[1.0, 2.0, 3.0], &[1, 1, 1], 10);
        assert!(g.single_class);
        assert_eq!(g.gain, 0.0);
    }
}
