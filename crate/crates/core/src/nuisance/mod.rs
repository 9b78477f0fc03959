//! Cross-fitted nuisance models on fused treatment groups.
//!
//! Units are split into `L` folds. For every fold, a multinomial logistic
//! propensity model and one outcome regression per group are trained on the
//! remaining folds and evaluated on the held-out units, so no unit's
//! predictions depend on its own fold.

mod logistic;
mod outcome;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use logistic::{fit_multinomial, LogisticOptions, MultinomialFit};
pub use outcome::{Poly2Ridge, RegressionTree, TreeBag};

/// Assignment of units to cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub n_folds: usize,
    /// Fold of each unit, `0..n_folds`.
    pub fold_of: Vec<usize>,
    pub seed: u64,
    /// False when some group was too small to stratify on.
    pub stratified: bool,
}

impl CrossFitPlan {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Splits `labels.len()` units into `n_folds` folds stratified by label.
///
/// Units of each label are shuffled and dealt round robin, continuing the
/// deal across labels, so fold sizes differ by at most one and every label
/// is spread evenly. If a label has fewer than `n_folds` units the split is
/// done without stratification and a warning is logged.
pub fn make_folds(labels: &[usize], n_folds: usize, seed: u64) -> Result<CrossFitPlan> {
    let n = labels.len();
    if n_folds < 2 {
        return Err(Error::Invalid(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_folds > n {
        return Err(Error::Invalid(format!("{n_folds} folds for {n} units")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = labels.iter().copied().max().unwrap_or(0);
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
    for (i, &b) in labels.iter().enumerate() {
        strata[b].push(i);
    }
    strata.retain(|s| !s.is_empty());
    let stratified = strata.iter().all(|s| s.len() >= n_folds);
    if !stratified {
        log::warn!("a group has fewer than {n_folds} units; folds are not stratified");
        strata = vec![(0..n).collect()];
    }
    let mut order: Vec<usize> = (0..n_folds).collect();
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    let mut next = 0;
    for stratum in &mut strata {
        stratum.shuffle(&mut rng);
        for &i in stratum.iter() {
            fold_of[i] = order[next % n_folds];
            next += 1;
        }
    }
    Ok(CrossFitPlan {
        n_folds,
        fold_of,
        seed,
        stratified,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// Ridge regression on a degree-2 polynomial expansion.
    #[default]
    RidgePoly2,
    /// Bootstrap-aggregated shallow regression trees.
    BaggedTrees,
}

impl std::str::FromStr for OutcomeModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge_poly2" => Ok(OutcomeModel::RidgePoly2),
            "bagged_trees" => Ok(OutcomeModel::BaggedTrees),
            other => Err(Error::Invalid(format!("unknown outcome model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub folds: usize,
    pub outcome_model: OutcomeModel,
    /// Propensity bounds `(lo, hi)`.
    pub clip: (f64, f64),
    pub propensity_ridge: f64,
    pub outcome_ridge: f64,
    pub trees: usize,
    pub tree_depth: usize,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            folds: 5,
            outcome_model: OutcomeModel::RidgePoly2,
            clip: (0.01, 0.99),
            propensity_ridge: 1e-4,
            outcome_ridge: 1e-3,
            trees: 100,
            tree_depth: 4,
        }
    }
}

impl NuisanceConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        let (lo, hi) = self.clip;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("clip bounds ({lo}, {hi}) must satisfy 0 < lo < hi <= 1")));
        }
        if m >= 2 && (lo * m as f64 > 1.0 || hi * (m as f64) < 1.0) {
            return Err(Error::Invalid(format!(
                "clip bounds ({lo}, {hi}) cannot hold for {m} groups"
            )));
        }
        if self.folds < 2 {
            return Err(Error::Invalid("folds must be at least 2".into()));
        }
        if self.trees == 0 {
            return Err(Error::Invalid("trees must be positive".into()));
        }
        Ok(())
    }
}

/// Out-of-fold nuisance predictions for every unit and every group.
#[derive(Debug, Clone)]
pub struct NuisanceEstimates {
    /// `n × M` clipped and renormalized propensities.
    pub pi_hat: DMatrix<f64>,
    /// `n × M` outcome predictions.
    pub mu_hat: DMatrix<f64>,
    pub clip: (f64, f64),
    pub warnings: Vec<String>,
}

/// Maps each row to `clamp(s·p_b, lo, hi)` with the scale `s` chosen by
/// bisection so the row sums to one.
pub fn clip_rows(p: &mut DMatrix<f64>, lo: f64, hi: f64) {
    let m = p.ncols();
    if m < 2 {
        p.fill(1.0);
        return;
    }
    for i in 0..p.nrows() {
        let row: Vec<f64> = p.row(i).iter().copied().collect();
        let mass = |s: f64| row.iter().map(|v| (s * v).clamp(lo, hi)).sum::<f64>();
        let (mut a, mut b) = (0.0, 1.0);
        while mass(b) < 1.0 && b < 1e300 {
            b *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mass(mid) < 1.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        let total = mass(b);
        for (j, v) in row.iter().enumerate() {
            p[(i, j)] = (b * v).clamp(lo, hi) / total;
        }
    }
}

fn check_inputs(x: &DMatrix<f64>, labels: &[usize], m: usize, plan: &CrossFitPlan) -> Result<()> {
    if labels.len() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if plan.n() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: plan.n(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&b| b == 0 || b > m) {
        return Err(Error::LabelOutOfRange { label: bad, k: m });
    }
    Ok(())
}

/// Out-of-fold multinomial logistic propensities, before clipping.
///
/// `x` is the design matrix with the intercept in column 0 and `labels`
/// are group ids in `1..=m`.
pub fn fit_propensity(
    x: &DMatrix<f64>,
    labels: &[usize],
    m: usize,
    plan: &CrossFitPlan,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    check_inputs(x, labels, m, plan)?;
    let n = x.nrows();
    if m < 2 {
        return Ok(DMatrix::from_element(n, m.max(1), 1.0));
    }
    let folds: Vec<(Vec<usize>, DMatrix<f64>)> = (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| {
            let train = plan.training_rows(fold);
            let held = plan.fold_rows(fold);
            let opts = LogisticOptions {
                ridge,
                ..LogisticOptions::default()
            };
            let fit = match fit_multinomial(x, labels, m, &train, &opts) {
                Ok(fit) => fit,
                Err(Error::MaxIterations { .. }) => {
                    log::warn!("propensity fit on fold {fold} did not converge; retrying with a larger ridge");
                    let retry = LogisticOptions {
                        ridge: ridge.max(1e-8) * 100.0,
                        ..opts
                    };
                    fit_multinomial(x, labels, m, &train, &retry)?
                }
                Err(e) => return Err(e),
            };
            Ok((held.clone(), fit.predict(x, &held)))
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(n, m);
    for (rows, probs) in folds {
        for (r, &i) in rows.iter().enumerate() {
            out.set_row(i, &probs.row(r));
        }
    }
    Ok(out)
}

/// Held-out predictions of one (fold, group) outcome fit.
struct CellFit {
    group: usize,
    rows: Vec<usize>,
    preds: Vec<f64>,
    warning: Option<String>,
}

/// Out-of-fold outcome predictions for every group at every unit.
///
/// Column `b` holds the group-`b` regression, fitted on the training folds
/// restricted to group `b`, evaluated at each held-out unit. A group with no
/// training units in some split predicts the training-split mean outcome.
pub fn fit_outcome(
    x: &DMatrix<f64>,
    y: &[f64],
    labels: &[usize],
    m: usize,
    plan: &CrossFitPlan,
    cfg: &NuisanceConfig,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    check_inputs(x, labels, m, plan)?;
    if y.len() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let n = x.nrows();
    let cells: Vec<(usize, usize)> = (0..plan.n_folds)
        .flat_map(|f| (1..=m).map(move |b| (f, b)))
        .collect();
    let fitted: Vec<CellFit> = cells
        .into_par_iter()
        .map(|(fold, b)| {
            let held = plan.fold_rows(fold);
            let train: Vec<usize> = plan.training_rows(fold);
            let in_group: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == b).collect();
            if in_group.is_empty() {
                let mean = train.iter().map(|&i| y[i]).sum::<f64>() / train.len().max(1) as f64;
                let msg = format!("group {b} has no training units outside fold {}; predicting the training mean", fold + 1);
                let preds = vec![mean; held.len()];
                return CellFit { group: b, rows: held, preds, warning: Some(msg) };
            }
            let seed = plan
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((fold * (m + 1) + b) as u64);
            let preds = match cfg.outcome_model {
                OutcomeModel::RidgePoly2 => {
                    Poly2Ridge::fit(x, y, &in_group, cfg.outcome_ridge).predict_rows(x, &held)
                }
                OutcomeModel::BaggedTrees => {
                    TreeBag::fit(x, y, &in_group, cfg.trees, cfg.tree_depth, seed).predict_rows(x, &held)
                }
            };
            CellFit { group: b, rows: held, preds, warning: None }
        })
        .collect();
    let mut out = DMatrix::zeros(n, m);
    let mut warnings = Vec::new();
    for cell in fitted {
        for (&i, &v) in cell.rows.iter().zip(&cell.preds) {
            out[(i, cell.group - 1)] = v;
        }
        if let Some(w) = cell.warning {
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok((out, warnings))
}

/// Fits both nuisance models on the same folds and applies clipping.
pub fn estimate_nuisance(
    x: &DMatrix<f64>,
    y: &[f64],
    labels: &[usize],
    m: usize,
    plan: &CrossFitPlan,
    cfg: &NuisanceConfig,
) -> Result<NuisanceEstimates> {
    cfg.validate(m)?;
    let mut pi_hat = fit_propensity(x, labels, m, plan, cfg.propensity_ridge)?;
    clip_rows(&mut pi_hat, cfg.clip.0, cfg.clip.1);
    let (mu_hat, mut warnings) = fit_outcome(x, y, labels, m, plan, cfg)?;
    if !plan.stratified {
        warnings.push("folds are not stratified by group".into());
    }
    Ok(NuisanceEstimates {
        pi_hat,
        mu_hat,
        clip: cfg.clip,
        warnings,
    })
}
