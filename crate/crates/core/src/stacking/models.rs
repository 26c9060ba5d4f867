use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::gain::entropy_bits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKind {
    Logit,
    Knn,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaParams {
    /// L2 penalty on Logit weights (the bias is not penalised).
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub knn_k: usize,
    pub tree_depth: usize,
    pub tree_min_leaf: usize,
}

impl Default for MetaParams {
    fn default() -> Self {
        MetaParams {
            l2: 1e-4,
            max_iter: 500,
            tol: 1e-8,
            knn_k: 5,
            tree_depth: 3,
            tree_min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        probability: f64,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetaModel {
    Logit {
        weights: Vec<f64>,
        bias: f64,
        iterations: usize,
        converged: bool,
    },
    Knn {
        k: usize,
        points: Vec<Vec<f64>>,
        labels: Vec<u8>,
    },
    Tree {
        root: TreeNode,
    },
}

/// Logistic function without clamping.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_training(x: &[Vec<f64>], y: &[u8]) -> Result<usize> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidInput("meta features and labels must be non-empty and aligned".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("meta feature rows differ in length".into()));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == y.len() {
        return Err(Error::Degenerate("meta-learner training data holds a single class".into()));
    }
    Ok(d)
}

pub fn fit_meta(kind: MetaKind, x: &[Vec<f64>], y: &[u8], params: &MetaParams) -> Result<MetaModel> {
    let d = check_training(x, y)?;
    Ok(match kind {
        MetaKind::Logit => fit_logit(x, y, d, params),
        MetaKind::Knn => MetaModel::Knn {
            k: params.knn_k.max(1),
            points: x.to_vec(),
            labels: y.to_vec(),
        },
        MetaKind::Tree => {
            let idx: Vec<usize> = (0..x.len()).collect();
            MetaModel::Tree {
                root: grow(x, y, &idx, params.tree_depth, params.tree_min_leaf.max(1)),
            }
        }
    })
}

/// Minimises `(1/N) sum_i c_i * nll_i + (l2/2) |w|^2` by Newton's method with
/// step halving, where `c_i` is the inverse-frequency weight of sample `i`'s class.
fn fit_logit(x: &[Vec<f64>], y: &[u8], d: usize, params: &MetaParams) -> MetaModel {
    let n = x.len();
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let cw = [n as f64 / (2.0 * (n - n1) as f64), n as f64 / (2.0 * n1 as f64)];
    let objective = |theta: &DVector<f64>| -> f64 {
        let mut s = 0.0;
        for (row, &yi) in x.iter().zip(y) {
            let z: f64 = theta[d] + row.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
            // log(1 + e^z) - y z, computed stably
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            s += cw[yi as usize] * (softplus - yi as f64 * z);
        }
        s / n as f64 + 0.5 * params.l2 * theta.rows(0, d).norm_squared()
    };
    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut f = objective(&theta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let mut grad = DVector::<f64>::zeros(d + 1);
        let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
        for (row, &yi) in x.iter().zip(y) {
            let z: f64 = theta[d] + row.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
            let p = logistic(z);
            let c = cw[yi as usize] / n as f64;
            let r = c * (p - yi as f64);
            let h = c * p * (1.0 - p);
            for a in 0..=d {
                let xa = if a == d { 1.0 } else { row[a] };
                grad[a] += r * xa;
                for b in 0..=d {
                    let xb = if b == d { 1.0 } else { row[b] };
                    hess[(a, b)] += h * xa * xb;
                }
            }
        }
        for a in 0..d {
            grad[a] += params.l2 * theta[a];
            hess[(a, a)] += params.l2;
        }
        // Tiny ridge on the bias keeps the system solvable when all predictions saturate.
        hess[(d, d)] += 1e-12;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut next = &theta - &step * t;
        let mut f_next = objective(&next);
        while f_next > f && t > 1e-10 {
            t *= 0.5;
            next = &theta - &step * t;
            f_next = objective(&next);
        }
        let change = (&next - &theta).amax();
        let improvement = f - f_next;
        if f_next <= f {
            theta = next;
            f = f_next;
        }
        if change < params.tol || improvement.abs() < params.tol * params.tol {
            converged = true;
            break;
        }
    }
    MetaModel::Logit {
        weights: theta.rows(0, d).iter().copied().collect(),
        bias: theta[d],
        iterations,
        converged,
    }
}

fn node_prob(y: &[u8], idx: &[usize]) -> f64 {
    idx.iter().filter(|&&i| y[i] == 1).count() as f64 / idx.len() as f64
}

/// Best split of `idx` over all features and midpoints between distinct values,
/// as `(feature, threshold, gain)`. Earlier features and lower thresholds win ties.
pub fn best_split(x: &[Vec<f64>], y: &[u8], idx: &[usize], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    let n1: usize = idx.iter().filter(|&&i| y[i] == 1).count();
    let parent = entropy_bits(n - n1, n1);
    let mut best: Option<(usize, f64, f64)> = None;
    let d = x.first().map_or(0, Vec::len);
    for f in 0..d {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left1 = 0;
        for k in 1..n {
            left1 += (y[order[k - 1]] == 1) as usize;
            let (lo, hi) = (x[order[k - 1]][f], x[order[k]][f]);
            if lo == hi || k < min_leaf || n - k < min_leaf {
                continue;
            }
            let right1 = n1 - left1;
            let h = (k as f64 * entropy_bits(k - left1, left1)
                + (n - k) as f64 * entropy_bits(n - k - right1, right1))
                / n as f64;
            let gain = parent - h;
            if gain > 1e-12 && best.is_none_or(|b| gain > b.2) {
                best = Some((f, lo + (hi - lo) / 2.0, gain));
            }
        }
    }
    best
}

fn grow(x: &[Vec<f64>], y: &[u8], idx: &[usize], depth: usize, min_leaf: usize) -> TreeNode {
    let leaf = || TreeNode::Leaf {
        probability: node_prob(y, idx),
        samples: idx.len(),
    };
    if depth == 0 {
        return leaf();
    }
    match best_split(x, y, idx, min_leaf) {
        None => leaf(),
        Some((feature, threshold, gain)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
            TreeNode::Split {
                feature,
                threshold,
                gain,
                left: Box::new(grow(x, y, &l, depth - 1, min_leaf)),
                right: Box::new(grow(x, y, &r, depth - 1, min_leaf)),
            }
        }
    }
}

impl MetaModel {
    /// Class-1 probability for one feature vector.
    pub fn probability(&self, x: &[f64]) -> f64 {
        match self {
            MetaModel::Logit { weights, bias, .. } => {
                logistic(bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            }
            MetaModel::Knn { k, points, labels } => {
                let mut d: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let k = (*k).min(d.len());
                d[..k].iter().filter(|(_, i)| labels[*i] == 1).count() as f64 / k as f64
            }
            MetaModel::Tree { root } => {
                let mut node = root;
                loop {
                    match node {
                        TreeNode::Leaf { probability, .. } => return *probability,
                        TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                            ..
                        } => node = if x[*feature] <= *threshold { left } else { right },
                    }
                }
            }
        }
    }
}

/// Probability and class (`probability >= threshold`).
pub fn predict_meta(model: &MetaModel, x: &[f64], threshold: f64) -> (f64, u8) {
    let p = model.probability(x);
    (p, (p >= threshold) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit_predicts_class_one_at_half() {
        let m = MetaModel::Logit {
            weights: vec![0.0, 0.0],
            bias: 0.0,
            iterations: 0,
            converged: true,
        };
        assert_eq!(predict_meta(&m, &[3.0, -1.0], 0.5), (0.5, 1));
    }

    #[test]
    fn logit_separates_toy_set() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0, ((i * 7) % 5) as f64]).collect();
        let y: Vec<u8> = (0..20).map(|i| (i >= 10) as u8).collect();
        let m = fit_meta(MetaKind::Logit, &x, &y, &MetaParams::default()).unwrap();
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(predict_meta(&m, r, 0.5).1, l);
        }
    }

    #[test]
    fn one_neighbour_memorises() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![(i * 3 % 7) as f64, i as f64]).collect();
        let y: Vec<u8> = (0..10).map(|i| (i % 3 == 0) as u8).collect();
        let params = MetaParams {
            knn_k: 1,
            ..MetaParams::default()
        };
        let m = fit_meta(MetaKind::Knn, &x, &y, &params).unwrap();
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(predict_meta(&m, r, 0.5).1, l);
        }
    }

    #[test]
    fn single_class_training_is_degenerate() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            fit_meta(MetaKind::Logit, &x, &[1, 1], &MetaParams::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tree_respects_depth_and_leaf_size() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<u8> = (0..40).map(|i| ((i / 5) % 2) as u8).collect();
        let m = fit_meta(MetaKind::Tree, &x, &y, &MetaParams::default()).unwrap();
        fn check(n: &TreeNode, depth: usize) {
            match n {
                TreeNode::Leaf { samples, .. } => assert!(*samples >= 5),
                TreeNode::Split { left, right, .. } => {
                    assert!(depth < 3);
                    check(left, depth + 1);
                    check(right, depth + 1);
                }
            }
        }
        let MetaModel::Tree { root } = &m else { unreachable!() };
        check(root, 0);
    }
}
