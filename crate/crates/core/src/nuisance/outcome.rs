use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::weighted_least_squares;

/// Degree-2 polynomial features of the non-intercept covariates in row `i`,
/// led by a constant.
fn poly2_row(x: &DMatrix<f64>, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    let q = x.ncols();
    for j in 1..q {
        out.push(x[(i, j)]);
    }
    for j in 1..q {
        for k in j..q {
            out.push(x[(i, j)] * x[(i, k)]);
        }
    }
}

/// Ridge regression on a quadratic expansion of the covariates.
#[derive(Debug, Clone)]
pub struct Poly2Ridge {
    pub coef: Vec<f64>,
}

impl Poly2Ridge {
    /// Minimizes `(1/n) Σ (y_i − φ_iᵀβ)² + ridge·‖β_{-0}‖²` over `rows`.
    pub fn fit(x: &DMatrix<f64>, y: &[f64], rows: &[usize], ridge: f64) -> Self {
        let mut buf = Vec::new();
        poly2_row(x, 0, &mut buf);
        let dim = buf.len();
        let phi = DMatrix::from_fn(rows.len(), dim, |_, _| 0.0);
        let mut phi = phi;
        for (r, &i) in rows.iter().enumerate() {
            poly2_row(x, i, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                phi[(r, j)] = *v;
            }
        }
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let w = vec![1.0 / rows.len() as f64; rows.len()];
        let all: Vec<usize> = (0..rows.len()).collect();
        let coef = weighted_least_squares(&phi, &ys, &w, &all, ridge);
        Poly2Ridge {
            coef: coef.iter().copied().collect(),
        }
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
        let mut buf = Vec::new();
        rows.iter()
            .map(|&i| {
                poly2_row(x, i, &mut buf);
                buf.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum TreeNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

/// Least-squares regression tree on the non-intercept covariates.
#[derive(Debug, Clone)]
pub struct RegressionTree {
    root: TreeNode,
}

const MIN_LEAF: usize = 5;

impl RegressionTree {
    /// Grows a tree of depth at most `depth` on `samples` (row indices,
    /// repeats allowed).
    pub fn fit(x: &DMatrix<f64>, y: &[f64], samples: &[usize], depth: usize) -> Self {
        let mut idx = samples.to_vec();
        RegressionTree {
            root: grow(x, y, &mut idx, depth),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[(i, *feature)] < *threshold { left } else { right };
                }
            }
        }
    }
}

fn mean(y: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len().max(1) as f64
}

fn grow(x: &DMatrix<f64>, y: &[f64], idx: &mut [usize], depth: usize) -> TreeNode {
    let n = idx.len();
    if depth == 0 || n < 2 * MIN_LEAF {
        return TreeNode::Leaf(mean(y, idx));
    }
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let mut best: Option<(f64, usize, f64)> = None;
    let base = total * total / n as f64;
    for feature in 1..x.ncols() {
        idx.sort_by(|&a, &b| x[(a, feature)].total_cmp(&x[(b, feature)]));
        let mut left = 0.0;
        for s in 1..n {
            left += y[idx[s - 1]];
            let lo = x[(idx[s - 1], feature)];
            let hi = x[(idx[s], feature)];
            if s < MIN_LEAF || n - s < MIN_LEAF || lo == hi {
                continue;
            }
            let right = total - left;
            let gain = left * left / s as f64 + right * right / (n - s) as f64 - base;
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, feature, 0.5 * (lo + hi)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return TreeNode::Leaf(mean(y, idx));
    };
    idx.sort_by(|&a, &b| x[(a, feature)].total_cmp(&x[(b, feature)]));
    let cut = idx.partition_point(|&i| x[(i, feature)] < threshold);
    let (l, r) = idx.split_at_mut(cut);
    TreeNode::Split {
        feature,
        threshold,
        left: Box::new(grow(x, y, l, depth - 1)),
        right: Box::new(grow(x, y, r, depth - 1)),
    }
}

/// Bootstrap aggregate of [`RegressionTree`]s.
#[derive(Debug, Clone)]
pub struct TreeBag {
    trees: Vec<RegressionTree>,
}

impl TreeBag {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], rows: &[usize], trees: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees)
            .map(|_| {
                let sample: Vec<usize> = (0..rows.len())
                    .map(|_| rows[rng.random_range(0..rows.len())])
                    .collect();
                RegressionTree::fit(x, y, &sample, depth)
            })
            .collect();
        TreeBag { trees }
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
        let k = self.trees.len() as f64;
        rows.iter()
            .map(|&i| self.trees.iter().map(|t| t.predict(x, i)).sum::<f64>() / k)
            .collect()
    }
}
