use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{Node, PolicyTree};
use crate::{Error, Result};

/// Default cap on split candidates per feature.
pub const DEFAULT_MAX_SPLITS: usize = 64;

/// Candidate thresholds for one feature: midpoints between consecutive
/// distinct values, thinned to at most `max_splits` quantile-spaced
/// midpoints when there are more. `None` keeps every midpoint.
pub fn split_candidates(values: &[f64], max_splits: Option<usize>) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut mids = Vec::new();
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            mids.push(0.5 * (w[0] + w[1]));
        }
    }
    let cap = match max_splits {
        Some(cap) if mids.len() > cap => cap,
        _ => return mids,
    };
    let n = sorted.len();
    let mut out: Vec<f64> = Vec::with_capacity(cap);
    for k in 1..=cap {
        let pos = ((k * n) as f64 / (cap + 1) as f64).round() as usize;
        let v = sorted[pos.clamp(1, n - 1) - 1];
        let idx = mids.partition_point(|&t| t <= v);
        if let Some(&t) = mids.get(idx.min(mids.len() - 1)) {
            if out.last().is_none_or(|&last| t > last) {
                out.push(t);
            }
        }
    }
    out
}

/// Per-feature candidate thresholds plus each unit's bin, where
/// `bin = #{thresholds ≤ x}`; a split at candidate `c` sends bins `≤ c` left.
struct Binned {
    thresholds: Vec<Vec<f64>>,
    bins: Vec<Vec<u16>>,
}

impl Binned {
    fn new(x: &DMatrix<f64>, thresholds: Vec<Vec<f64>>) -> Self {
        let bins = thresholds
            .iter()
            .enumerate()
            .map(|(j, t)| {
                (0..x.nrows())
                    .map(|i| t.partition_point(|&v| v <= x[(i, j)]) as u16)
                    .collect()
            })
            .collect();
        Binned { thresholds, bins }
    }

    fn q(&self) -> usize {
        self.thresholds.len()
    }

    fn nbins(&self, j: usize) -> usize {
        self.thresholds[j].len() + 1
    }
}

struct Ctx<'a> {
    gamma: &'a DMatrix<f64>,
    binned: &'a Binned,
    m: usize,
}

#[derive(Clone)]
struct Found {
    value: f64,
    node: Node,
}

fn better(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + 1e-12 * (1.0 + incumbent.abs())
}

fn best_action(sums: &[f64]) -> (usize, f64) {
    let mut best = (0, sums[0]);
    for (b, &v) in sums.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (b, v);
        }
    }
    best
}

fn leaf(sums: &[f64]) -> Found {
    let (b, v) = best_action(sums);
    Found {
        value: v,
        node: Node::Leaf { action: b + 1 },
    }
}

fn split(feature: usize, threshold: f64, left: Found, right: Found) -> Found {
    let value = left.value + right.value;
    let node = match (&left.node, &right.node) {
        (Node::Leaf { action: a }, Node::Leaf { action: b }) if a == b => Node::Leaf { action: *a },
        _ => Node::Split {
            feature,
            threshold,
            left: Box::new(left.node),
            right: Box::new(right.node),
        },
    };
    Found { value, node }
}

impl Ctx<'_> {
    fn column_sums(&self, units: &[usize]) -> Vec<f64> {
        let mut sums = vec![0.0; self.m];
        for &i in units {
            for b in 0..self.m {
                sums[b] += self.gamma[(i, b)];
            }
        }
        sums
    }

    /// Histogram `hist[j][bin * m + b]` of score sums.
    fn histogram(&self, units: &[usize]) -> Vec<Vec<f64>> {
        let m = self.m;
        let mut hist: Vec<Vec<f64>> = (0..self.binned.q())
            .map(|j| vec![0.0; self.binned.nbins(j) * m])
            .collect();
        for &i in units {
            let row: Vec<f64> = (0..m).map(|b| self.gamma[(i, b)]).collect();
            for (j, h) in hist.iter_mut().enumerate() {
                let base = self.binned.bins[j][i] as usize * m;
                for b in 0..m {
                    h[base + b] += row[b];
                }
            }
        }
        hist
    }

    /// Best depth-≤1 tree given histogram, count and total accessors.
    fn depth_one<H, C>(&self, hist: H, counts: C, totals: &[f64]) -> Found
    where
        H: Fn(usize, usize) -> f64,
        C: Fn(usize, usize) -> u32,
    {
        let m = self.m;
        let mut best = leaf(totals);
        let mut left = vec![0.0; m];
        for j in 0..self.binned.q() {
            left.iter_mut().for_each(|v| *v = 0.0);
            let nb = self.binned.nbins(j);
            let total_count: u32 = (0..nb).map(|c| counts(j, c)).sum();
            let mut seen = 0u32;
            for c in 0..nb - 1 {
                let cnt = counts(j, c);
                for (b, v) in left.iter_mut().enumerate() {
                    *v += hist(j, c * m + b);
                }
                if cnt == 0 {
                    continue;
                }
                seen += cnt;
                if seen == total_count {
                    break;
                }
                let (la, lv) = best_action(&left);
                let (mut ra, mut rv) = (0, totals[0] - left[0]);
                for b in 1..m {
                    let v = totals[b] - left[b];
                    if v > rv {
                        ra = b;
                        rv = v;
                    }
                }
                if la != ra && better(lv + rv, best.value) {
                    best = Found {
                        value: lv + rv,
                        node: Node::Split {
                            feature: j,
                            threshold: self.binned.thresholds[j][c],
                            left: Box::new(Node::Leaf { action: la + 1 }),
                            right: Box::new(Node::Leaf { action: ra + 1 }),
                        },
                    };
                }
            }
        }
        best
    }

    fn counts(&self, units: &[usize]) -> Vec<Vec<u32>> {
        (0..self.binned.q())
            .map(|j| {
                let mut c = vec![0u32; self.binned.nbins(j)];
                for &i in units {
                    c[self.binned.bins[j][i] as usize] += 1;
                }
                c
            })
            .collect()
    }

    /// Units sorted by their bin on feature `j` (counting sort, stable).
    fn sorted_by(&self, units: &[usize], j: usize) -> (Vec<usize>, Vec<usize>) {
        let nb = self.binned.nbins(j);
        let mut starts = vec![0usize; nb + 1];
        for &i in units {
            starts[self.binned.bins[j][i] as usize + 1] += 1;
        }
        for c in 0..nb {
            starts[c + 1] += starts[c];
        }
        let ends = starts.clone();
        let mut pos = starts;
        let mut out = vec![0; units.len()];
        for &i in units {
            let bin = self.binned.bins[j][i] as usize;
            out[pos[bin]] = i;
            pos[bin] += 1;
        }
        (out, ends[1..].to_vec())
    }

    fn solve_depth_two(&self, units: &[usize]) -> Found {
        let m = self.m;
        let totals = self.column_sums(units);
        let full_hist = self.histogram(units);
        let full_counts = self.counts(units);
        let mut best = self.depth_one(|j, k| full_hist[j][k], |j, c| full_counts[j][c], &totals);
        let q = self.binned.q();
        for j in 0..q {
            let (order, ends) = self.sorted_by(units, j);
            let mut left_hist: Vec<Vec<f64>> = full_hist.iter().map(|h| vec![0.0; h.len()]).collect();
            let mut left_counts: Vec<Vec<u32>> = full_counts.iter().map(|c| vec![0; c.len()]).collect();
            let mut left_tot = vec![0.0; m];
            let mut start = 0;
            for c in 0..self.binned.nbins(j) - 1 {
                let end = ends[c];
                if end == start {
                    continue;
                }
                for &i in &order[start..end] {
                    for jj in 0..q {
                        let bin = self.binned.bins[jj][i] as usize;
                        left_counts[jj][bin] += 1;
                        for b in 0..m {
                            left_hist[jj][bin * m + b] += self.gamma[(i, b)];
                        }
                    }
                    for b in 0..m {
                        left_tot[b] += self.gamma[(i, b)];
                    }
                }
                start = end;
                if end == units.len() {
                    break;
                }
                let right_tot: Vec<f64> = totals.iter().zip(&left_tot).map(|(a, b)| a - b).collect();
                let l = self.depth_one(|j, k| left_hist[j][k], |j, c| left_counts[j][c], &left_tot);
                let r = self.depth_one(
                    |j, k| full_hist[j][k] - left_hist[j][k],
                    |j, c| full_counts[j][c] - left_counts[j][c],
                    &right_tot,
                );
                if better(l.value + r.value, best.value) {
                    best = split(j, self.binned.thresholds[j][c], l, r);
                }
            }
        }
        best
    }

    /// Candidate splits that change the partition: `(feature, candidate,
    /// sorted order, prefix length)`.
    fn splits_of(&self, units: &[usize]) -> Vec<(usize, usize, std::sync::Arc<Vec<usize>>, usize)> {
        let mut out = Vec::new();
        for j in 0..self.binned.q() {
            let (order, ends) = self.sorted_by(units, j);
            let order = std::sync::Arc::new(order);
            let mut prev = 0;
            for c in 0..self.binned.nbins(j) - 1 {
                let end = ends[c];
                if end == prev {
                    continue;
                }
                prev = end;
                if end == units.len() {
                    break;
                }
                out.push((j, c, order.clone(), end));
            }
        }
        out
    }

    fn solve(&self, units: &[usize], depth: usize, parallel: bool) -> Found {
        if units.is_empty() {
            return Found {
                value: 0.0,
                node: Node::Leaf { action: 1 },
            };
        }
        match depth {
            0 => leaf(&self.column_sums(units)),
            1 => {
                let totals = self.column_sums(units);
                let hist = self.histogram(units);
                let counts = self.counts(units);
                self.depth_one(|j, k| hist[j][k], |j, c| counts[j][c], &totals)
            }
            2 => self.solve_depth_two(units),
            _ => {
                let mut best = leaf(&self.column_sums(units));
                let splits = self.splits_of(units);
                let eval = |(j, c, order, end): &(usize, usize, std::sync::Arc<Vec<usize>>, usize)| {
                    let l = self.solve(&order[..*end], depth - 1, false);
                    let r = self.solve(&order[*end..], depth - 1, false);
                    (*j, *c, l, r)
                };
                let results: Vec<_> = if parallel && units.len() >= 256 {
                    splits.par_iter().map(eval).collect()
                } else {
                    splits.iter().map(eval).collect()
                };
                for (j, c, l, r) in results {
                    if better(l.value + r.value, best.value) {
                        best = split(j, self.binned.thresholds[j][c], l, r);
                    }
                }
                best
            }
        }
    }
}

/// Options for [`exact_tree_search`].
#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub depth: usize,
    /// Per-feature cap on candidate thresholds; `None` uses every midpoint.
    pub max_splits: Option<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            depth: 3,
            max_splits: Some(DEFAULT_MAX_SPLITS),
        }
    }
}

/// Finds the depth-≤D tree over `x_policy` maximizing `Σ_i Γ[i, tree(x_i)]`
/// among trees whose thresholds come from [`split_candidates`]. Returns the
/// tree and its mean score.
pub fn exact_tree_search(
    gamma: &DMatrix<f64>,
    x_policy: &DMatrix<f64>,
    features: Vec<String>,
    opts: &SearchOptions,
) -> Result<(PolicyTree, f64)> {
    let n = gamma.nrows();
    if x_policy.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: x_policy.nrows(),
        });
    }
    if x_policy.ncols() == 0 {
        return Err(Error::Invalid("policy search needs at least one covariate".into()));
    }
    if features.len() != x_policy.ncols() {
        return Err(Error::Dimension {
            expected: x_policy.ncols(),
            got: features.len(),
        });
    }
    if gamma.ncols() == 0 || n == 0 {
        return Err(Error::Empty("no scores to search over".into()));
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite policy scores".into()));
    }
    let thresholds: Vec<Vec<f64>> = (0..x_policy.ncols())
        .map(|j| {
            let col: Vec<f64> = x_policy.column(j).iter().copied().collect();
            split_candidates(&col, opts.max_splits)
        })
        .collect();
    if thresholds.iter().any(|t| t.len() >= u16::MAX as usize) {
        return Err(Error::Invalid("too many split candidates; set a cap".into()));
    }
    let binned = Binned::new(x_policy, thresholds);
    let ctx = Ctx {
        gamma,
        binned: &binned,
        m: gamma.ncols(),
    };
    let units: Vec<usize> = (0..n).collect();
    let found = ctx.solve(&units, opts.depth, true);
    let tree = PolicyTree {
        depth: opts.depth,
        features,
        n_actions: gamma.ncols(),
        root: found.node,
    };
    Ok((tree, found.value / n as f64))
}
