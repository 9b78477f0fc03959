//! Brute-force oracles shared by the integration test targets.

#![allow(dead_code)]

use drfusion::policy::{split_candidates, Node, PolicyTree};
use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_instance(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let n = rng.random_range(2..=50);
    let q = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let depth = rng.random_range(0..=2);
    // Coarse grids produce ties, continuous draws produce many candidates.
    let coarse = rng.random::<bool>();
    let x = DMatrix::from_fn(n, q, |_, _| {
        if coarse {
            rng.random_range(0..5) as f64
        } else {
            rng.random::<f64>()
        }
    });
    let gamma = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    (gamma, x, depth)
}

pub fn tree_value(tree: &Node, gamma: &DMatrix<f64>, x: &DMatrix<f64>, units: &[usize]) -> f64 {
    let t = PolicyTree {
        depth: 2,
        features: vec![String::new(); x.ncols()],
        n_actions: gamma.ncols(),
        root: tree.clone(),
    };
    units
        .iter()
        .map(|&i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            gamma[(i, t.predict(&row) - 1)]
        })
        .sum()
}

/// Every tree of depth ≤ 1 over the candidate thresholds.
fn shallow_trees(thresholds: &[Vec<f64>], m: usize) -> Vec<Node> {
    let mut out: Vec<Node> = (1..=m).map(|a| Node::Leaf { action: a }).collect();
    for (j, ts) in thresholds.iter().enumerate() {
        for &t in ts {
            for l in 1..=m {
                for r in 1..=m {
                    out.push(Node::Split {
                        feature: j,
                        threshold: t,
                        left: Box::new(Node::Leaf { action: l }),
                        right: Box::new(Node::Leaf { action: r }),
                    });
                }
            }
        }
    }
    out
}

pub fn brute_force(gamma: &DMatrix<f64>, x: &DMatrix<f64>, depth: usize) -> f64 {
    let n = gamma.nrows();
    let m = gamma.ncols();
    let thresholds: Vec<Vec<f64>> = (0..x.ncols())
        .map(|j| split_candidates(x.column(j).as_slice(), None))
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let shallow = shallow_trees(&thresholds, m);
    let best_over = |trees: &[Node], units: &[usize]| {
        trees
            .iter()
            .map(|t| tree_value(t, gamma, x, units))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let total = match depth {
        0 => best_over(&shallow[..m], &all),
        1 => best_over(&shallow, &all),
        _ => {
            // The two subtrees of a root split are scored on disjoint units,
            // so the best pair is the best left tree plus the best right tree.
            let mut best = best_over(&shallow, &all);
            for (j, ts) in thresholds.iter().enumerate() {
                for &t in ts {
                    let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[(i, j)] < t);
                    let v = best_over(&shallow, &l) + best_over(&shallow, &r);
                    best = best.max(v);
                }
            }
            best
        }
    };
    total / n as f64
}

/// Draws `count` instances from a fixed seed and returns the worst gap
/// between the search value and the brute-force value, along with the worst
/// gap between the reported value and the returned tree's own score.
pub fn worst_search_gap(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut value_gap, mut tree_gap) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let (gamma, x, depth) = random_instance(&mut rng);
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let opts = drfusion::policy::SearchOptions { depth, max_splits: None };
        let (tree, value) = drfusion::policy::exact_tree_search(&gamma, &x, names, &opts).unwrap();
        value_gap = value_gap.max((value - brute_force(&gamma, &x, depth)).abs());
        let all: Vec<usize> = (0..x.nrows()).collect();
        tree_gap = tree_gap.max((tree_value(&tree.root, &gamma, &x, &all) / x.nrows() as f64 - value).abs());
    }
    (value_gap, tree_gap)
}

/// Weighted least squares by SVD of `√w·X`, independent of the normal
/// equations the library solves.
pub fn svd_wls(x: &DMatrix<f64>, y: &[f64], w: &[f64], rows: &[usize]) -> Vec<f64> {
    let p = x.ncols();
    let a = DMatrix::from_fn(rows.len(), p, |r, j| w[rows[r]].sqrt() * x[(rows[r], j)]);
    let b = nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|&i| w[i].sqrt() * y[i]));
    a.svd(true, true).solve(&b, 1e-14).unwrap().iter().copied().collect()
}

/// A random fusion problem: K arms with random sizes, an intercept plus
/// uniform covariates, and within-arm weights summing to one.
pub fn random_fusion_instance(rng: &mut ChaCha8Rng) -> (drfusion::dataset::Dataset, Vec<f64>, Vec<f64>) {
    let k = rng.random_range(2..=6);
    let p = rng.random_range(1..=4);
    let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(p + 3..=40)).collect();
    let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(a, &s)| std::iter::repeat_n(a + 1, s)).collect();
    let n = labels.len();
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 4.0 - 2.0 });
    let y: Vec<f64> = (0..n).map(|i| labels[i] as f64 * x[(i, p - 1)] + rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut w: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
    for a in 1..=k {
        let total: f64 = (0..n).filter(|&i| labels[i] == a).map(|i| w[i]).sum();
        for i in 0..n {
            if labels[i] == a {
                w[i] /= total;
            }
        }
    }
    let names = (0..p).map(|j| format!("x{j}")).collect();
    let d = drfusion::dataset::Dataset::new(x, labels, y.clone(), names, None).unwrap();
    (d, y, w)
}

fn tight_admm() -> drfusion::fusion::AdmmConfig {
    drfusion::fusion::AdmmConfig { tol: 1e-11, max_iter: 200_000, ..Default::default() }
}

/// Worst coefficient gaps over `count` random instances: the λ = 0 fit
/// against per-arm least squares, and a fit far past the fusion bound
/// against pooled least squares.
pub fn worst_fusion_gaps(count: usize, seed: u64) -> (f64, f64) {
    use drfusion::fusion::{weighted_fused_fit, FusionProblem, PenaltySpec};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut separate_gap, mut pooled_gap) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let (d, y, w) = random_fusion_instance(&mut rng);
        let problem = FusionProblem::new(&d, &y, &w).unwrap();
        let fit = weighted_fused_fit(&problem, &PenaltySpec::l1(0.0), &tight_admm(), None).unwrap();
        for (a, rows) in d.rows_by_arm().iter().enumerate() {
            let oracle = svd_wls(d.x(), &y, &w, rows);
            for (j, o) in oracle.iter().enumerate() {
                separate_gap = separate_gap.max((fit.beta[(a, j)] - o).abs());
            }
        }
        let lambda = 10.0 * problem.l1_fusion_bound() + 1e-3;
        let fit = weighted_fused_fit(&problem, &PenaltySpec::l1(lambda), &tight_admm(), None).unwrap();
        let all: Vec<usize> = (0..d.n()).collect();
        let oracle = svd_wls(d.x(), &y, &w, &all);
        for a in 0..d.k() {
            for (j, o) in oracle.iter().enumerate() {
                pooled_gap = pooled_gap.max((fit.beta[(a, j)] - o).abs());
            }
        }
    }
    (separate_gap, pooled_gap)
}

/// Worst gap between the fused fit and a two-stage grid search on a K = 2,
/// intercept-only problem, over several penalty levels.
pub fn toy_grid_gap() -> f64 {
    use drfusion::fusion::{weighted_fused_fit, FusionProblem, PenaltySpec};
    let x = DMatrix::from_element(7, 1, 1.0);
    let labels = vec![1, 1, 1, 1, 2, 2, 2];
    let y = vec![1.0, 2.0, 1.5, 0.7, -0.5, 0.3, 0.1];
    let w = vec![0.2, 0.4, 0.3, 0.1, 0.3, 0.3, 0.4];
    let d = drfusion::dataset::Dataset::new(x, labels.clone(), y.clone(), vec!["intercept".into()], None).unwrap();
    let problem = FusionProblem::new(&d, &y, &w).unwrap();
    let objective = |b: [f64; 2], lambda: f64| {
        let loss: f64 = (0..7).map(|i| w[i] * (y[i] - b[labels[i] - 1]).powi(2)).sum::<f64>() / 14.0;
        loss + lambda * (b[0] - b[1]).abs()
    };
    let search = |lambda: f64, centre: [f64; 2], half: f64, steps: usize| {
        let h = 2.0 * half / steps as f64;
        let mut best = (f64::INFINITY, centre);
        for i in 0..=steps {
            for j in 0..=steps {
                let b = [centre[0] - half + i as f64 * h, centre[1] - half + j as f64 * h];
                let v = objective(b, lambda);
                if v < best.0 {
                    best = (v, b);
                }
            }
        }
        best.1
    };
    let mut gap = 0.0f64;
    for lambda in [0.0, 0.005, 0.02, 0.05, 0.5] {
        let coarse = search(lambda, [0.0, 0.0], 5.0, 400);
        let fine = search(lambda, coarse, 0.05, 400);
        let fit = weighted_fused_fit(&problem, &PenaltySpec::l1(lambda), &tight_admm(), None).unwrap();
        gap = gap.max((fit.beta[(0, 0)] - fine[0]).abs()).max((fit.beta[(1, 0)] - fine[1]).abs());
    }
    gap
}
