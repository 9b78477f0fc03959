//! Calibration-weighted fused regression across treatment arms.
//!
//! Each arm `a` gets its own linear coefficient vector `β_a` for the
//! transformed outcome `ỹ = y − M₀(x)`; pairwise fusion penalties pull the
//! vectors of similar arms together. Arms whose fitted vectors lie within a
//! Euclidean distance threshold of each other (single linkage) form a group.
//! The penalty level is chosen by an extended BIC computed on the grouped
//! refit.

mod admm;
mod penalty;

pub use admm::{weighted_fused_fit, AdmmConfig, AdmmFit, AdmmState, FusionProblem};
pub use penalty::{soft_threshold, PenaltyKind, PenaltySpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroupMapping};
use crate::error::{Error, Result};
use crate::linalg::{row_dot, weighted_least_squares};

pub const DEFAULT_THRESHOLD: f64 = 0.25;
pub const DEFAULT_GRID_SIZE: usize = 30;
pub const DEFAULT_GRID_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainEffect {
    /// Unweighted least squares of `y` on `x` over all units.
    PooledOls,
    Zero,
}

/// Coefficients of the main-effect fit `M₀(x) = xᵀ m0`.
pub fn fit_main_effect(d: &Dataset, mode: MainEffect) -> Vec<f64> {
    match mode {
        MainEffect::Zero => vec![0.0; d.p()],
        MainEffect::PooledOls => {
            let rows: Vec<usize> = (0..d.n()).collect();
            let ones = vec![1.0; d.n()];
            weighted_least_squares(d.x(), d.outcomes(), &ones, &rows, 0.0).iter().copied().collect()
        }
    }
}

/// Transformed outcome `ỹ_i = y_i − x_iᵀ m0`.
pub fn transform(d: &Dataset, m0: &[f64]) -> Vec<f64> {
    (0..d.n()).map(|i| d.outcomes()[i] - row_dot(d.x(), i, m0)).collect()
}

/// Groups arms by single linkage over pairs with `‖β_a − β_b‖₂ < threshold`.
/// Group ids follow the smallest member treatment.
pub fn extract_groups(beta: &DMatrix<f64>, threshold: f64) -> GroupMapping {
    let k = beta.nrows();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..k {
        for b in a + 1..k {
            let dist = (beta.row(a) - beta.row(b)).norm();
            if dist < threshold {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..k).map(|a| find(&mut parent, a)).collect();
    GroupMapping::canonical(&roots)
}

/// Per-group pooled weighted least squares; rows are replicated within groups.
pub fn oracle_refit(d: &Dataset, ytilde: &[f64], weights: &[f64], groups: &GroupMapping) -> Result<DMatrix<f64>> {
    if groups.k() != d.k() {
        return Err(Error::Dimension { expected: d.k(), got: groups.k() });
    }
    let mut group_rows = vec![Vec::new(); groups.m()];
    for (i, &a) in d.treatments().iter().enumerate() {
        group_rows[groups.group_of(a).expect("validated") - 1].push(i);
    }
    let coefs: Vec<DVector<f64>> = group_rows
        .iter()
        .map(|rows| weighted_least_squares(d.x(), ytilde, weights, rows, 0.0))
        .collect();
    let mut beta = DMatrix::zeros(d.k(), d.p());
    for a in 0..d.k() {
        let b = groups.delta()[a] - 1;
        beta.set_row(a, &coefs[b].transpose());
    }
    Ok(beta)
}

/// Weighted residual sum of squares of arm-specific coefficients.
pub fn weighted_rss(d: &Dataset, ytilde: &[f64], weights: &[f64], beta: &DMatrix<f64>) -> f64 {
    (0..d.n())
        .map(|i| {
            let a = d.treatments()[i] - 1;
            let fit: f64 = (0..d.p()).map(|j| d.x()[(i, j)] * beta[(a, j)]).sum();
            weights[i] * (ytilde[i] - fit).powi(2)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbicPoint {
    pub lambda: f64,
    pub ebic: f64,
    pub m_hat: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub penalty: PenaltyKind,
    pub mcp_c: f64,
    pub threshold: f64,
    pub ebic_gamma: f64,
    /// Explicit lambda grid; automatic when `None`.
    pub lambda_grid: Option<Vec<f64>>,
    pub grid_size: usize,
    pub grid_ratio: f64,
    pub main_effect: MainEffect,
    pub admm: AdmmConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            penalty: PenaltyKind::L1,
            mcp_c: 3.0,
            threshold: DEFAULT_THRESHOLD,
            ebic_gamma: 0.5,
            lambda_grid: None,
            grid_size: DEFAULT_GRID_SIZE,
            grid_ratio: DEFAULT_GRID_RATIO,
            main_effect: MainEffect::PooledOls,
            admm: AdmmConfig::default(),
        }
    }
}

impl FusionConfig {
    fn penalty_at(&self, lambda: f64) -> PenaltySpec {
        PenaltySpec { kind: self.penalty, lambda, mcp_c: self.mcp_c }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    /// Fused coefficients at the selected lambda, one row per treatment.
    #[serde(with = "matrix_rows")]
    pub beta: DMatrix<f64>,
    /// Grouped refit at the selected lambda.
    #[serde(with = "matrix_rows")]
    pub refit_beta: DMatrix<f64>,
    pub lambda_selected: f64,
    /// Sorted by increasing lambda.
    pub ebic_path: Vec<EbicPoint>,
    pub groups: GroupMapping,
    pub m0_coefficients: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Extended BIC of a grouped fit.
pub fn ebic(n: usize, wrss: f64, m_hat: usize, p: usize, k: usize, ebic_gamma: f64) -> f64 {
    let n_f = n as f64;
    let df = (m_hat * p) as f64;
    n_f * (wrss.max(f64::MIN_POSITIVE) / n_f).ln() + df * n_f.ln() + 2.0 * ebic_gamma * df * ((k * p) as f64).ln()
}

/// Automatic grid: `size` log-spaced values from `λ_max` down to
/// `λ_max · ratio`, where `λ_max` is the smallest value on a halving sequence
/// from the analytic l1 fusion bound that still yields a single group.
pub fn lambda_grid(problem: &FusionProblem, cfg: &FusionConfig) -> Result<Vec<f64>> {
    let mut lambda = problem.l1_fusion_bound().max(1e-12);
    let single = |lambda: f64, warm: Option<&AdmmState>| -> Result<(bool, AdmmState)> {
        let fit = weighted_fused_fit(problem, &cfg.penalty_at(lambda), &cfg.admm, warm)?;
        Ok((extract_groups(&fit.beta, cfg.threshold).m() == 1, fit.state))
    };
    let (mut fused, mut state) = single(lambda, None)?;
    let mut doublings = 0;
    while !fused {
        lambda *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Invalid("could not find a lambda that fuses all arms".into()));
        }
        (fused, state) = single(lambda, Some(&state))?;
    }
    loop {
        let (still, next) = single(lambda / 2.0, Some(&state))?;
        if !still {
            break;
        }
        lambda /= 2.0;
        state = next;
        if lambda < 1e-300 {
            break;
        }
    }
    let size = cfg.grid_size.max(1);
    Ok((0..size)
        .map(|i| {
            let frac = if size == 1 { 0.0 } else { i as f64 / (size - 1) as f64 };
            lambda * cfg.grid_ratio.powf(frac)
        })
        .collect())
}

/// Fits the whole lambda path and selects the EBIC minimizer.
pub fn ebic_select(d: &Dataset, ytilde: &[f64], weights: &[f64], m0: Vec<f64>, cfg: &FusionConfig) -> Result<FusionResult> {
    let problem = FusionProblem::new(d, ytilde, weights)?;
    let mut grid = match &cfg.lambda_grid {
        Some(g) if g.is_empty() => return Err(Error::Invalid("lambda grid is empty".into())),
        Some(g) => g.clone(),
        None => lambda_grid(&problem, cfg)?,
    };
    if grid.iter().any(|&l| l.is_nan() || l < 0.0) {
        return Err(Error::Invalid("lambda grid values must be >= 0".into()));
    }
    // Largest first so each fit warm-starts from a more fused neighbour.
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let mut warm: Option<AdmmState> = None;
    let mut fits = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let fit = weighted_fused_fit(&problem, &cfg.penalty_at(lambda), &cfg.admm, warm.as_ref())?;
        let groups = extract_groups(&fit.beta, cfg.threshold);
        let refit = oracle_refit(d, ytilde, weights, &groups)?;
        let wrss = weighted_rss(d, ytilde, weights, &refit);
        let score = ebic(d.n(), wrss, groups.m(), d.p(), d.k(), cfg.ebic_gamma);
        warm = Some(fit.state.clone());
        fits.push((EbicPoint { lambda, ebic: score, m_hat: groups.m(), converged: fit.converged }, fit.beta, refit, groups));
    }

    let mut warnings = Vec::new();
    if cfg.penalty == PenaltyKind::L1 {
        for pair in fits.windows(2) {
            // fits are ordered by decreasing lambda
            if pair[1].0.m_hat < pair[0].0.m_hat {
                warnings.push(format!(
                    "group count rose from {} to {} as lambda increased from {:.4e} to {:.4e}",
                    pair[1].0.m_hat, pair[0].0.m_hat, pair[1].0.lambda, pair[0].0.lambda
                ));
            }
        }
    }
    for (point, ..) in &fits {
        if !point.converged {
            warnings.push(format!("ADMM did not converge at lambda {:.4e}", point.lambda));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    // Strict improvement only: ties keep the larger lambda (fewer groups).
    let best = fits
        .iter()
        .enumerate()
        .fold(0, |best, (i, f)| if f.0.ebic < fits[best].0.ebic { i } else { best });
    let (point, beta, refit, groups) = fits[best].clone();
    let mut ebic_path: Vec<EbicPoint> = fits.into_iter().map(|f| f.0).collect();
    ebic_path.reverse();
    Ok(FusionResult {
        beta,
        refit_beta: refit,
        lambda_selected: point.lambda,
        ebic_path,
        groups,
        m0_coefficients: m0,
        warnings,
    })
}

/// Main effect, transformation and EBIC-selected fusion in one call.
pub fn fuse(d: &Dataset, weights: &[f64], cfg: &FusionConfig) -> Result<FusionResult> {
    let m0 = fit_main_effect(d, cfg.main_effect);
    let ytilde = transform(d, &m0);
    ebic_select(d, &ytilde, weights, m0, cfg)
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CalibrationResult;

    #[test]
    fn main_effect_modes() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = vec![1.0, 3.0, 5.0, 7.0];
        let d = Dataset::from_covariates(&x, vec![1, 2, 1, 2], y.clone(), vec!["x".into()], None).unwrap();
        let zero = fit_main_effect(&d, MainEffect::Zero);
        assert_eq!(transform(&d, &zero), y);
        let m0 = fit_main_effect(&d, MainEffect::PooledOls);
        assert!(transform(&d, &m0).iter().all(|r| r.abs() < 1e-8));
    }

    #[test]
    fn pooled_main_effect_shrinks_linear_scenario() {
        let s = crate::synth::generate(&crate::synth::ScenarioConfig::linear_misspecified().with_seed(5)).unwrap();
        let d = &s.dataset;
        let ytilde = transform(d, &fit_main_effect(d, MainEffect::PooledOls));
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(&ytilde) < var(d.outcomes()));
    }

    #[test]
    fn grouping_rules() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(extract_groups(&same, 0.25).m(), 1);

        let split = DMatrix::from_row_slice(2, 1, &[0.0, 0.25]);
        assert_eq!(extract_groups(&split, 0.25).m(), 2);

        let chain = DMatrix::from_row_slice(3, 1, &[0.0, 0.2, 0.4]);
        let g = extract_groups(&chain, 0.25);
        assert_eq!(g.delta(), [1, 1, 1]);

        let mixed = DMatrix::from_row_slice(4, 1, &[5.0, 0.0, 5.1, 0.1]);
        assert_eq!(extract_groups(&mixed, 0.25).delta(), [1, 2, 1, 2]);
    }

    #[test]
    fn refit_extremes() {
        let s = crate::synth::generate(&crate::synth::ScenarioConfig::nonlinear(16).with_seed(1)).unwrap();
        let d = &s.dataset;
        let w = CalibrationResult::uniform(d).weights;
        let y = d.outcomes();
        let problem = FusionProblem::new(d, y, &w).unwrap();
        let singletons = oracle_refit(d, y, &w, &GroupMapping::identity(16)).unwrap();
        assert!((singletons - problem.separate_fit()).amax() < 1e-9);
        let pooled = oracle_refit(d, y, &w, &GroupMapping::single(16)).unwrap();
        let direct = problem.pooled_fit();
        for a in 0..16 {
            for j in 0..4 {
                assert!((pooled[(a, j)] - direct[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_grid_keeps_all_arms() {
        let s = crate::synth::generate(&crate::synth::ScenarioConfig::nonlinear(16).with_seed(3)).unwrap();
        let d = &s.dataset;
        let w = CalibrationResult::uniform(d).weights;
        let cfg = FusionConfig { lambda_grid: Some(vec![0.0]), ..Default::default() };
        let res = fuse(d, &w, &cfg).unwrap();
        assert_eq!(res.lambda_selected, 0.0);
        let problem = FusionProblem::new(d, &transform(d, &res.m0_coefficients), &w).unwrap();
        assert!((&res.beta - problem.separate_fit()).amax() < 1e-4);
        assert_eq!(res.groups.m(), 16);
    }

    #[test]
    fn identical_arms_fuse_to_one_group() {
        let cfg0 = crate::synth::ScenarioConfig::linear_misspecified().with_seed(4);
        let s = crate::synth::generate(&cfg0).unwrap();
        // Replace every outcome with group 1's mean so all arms share one regression.
        let d = &s.dataset;
        let y: Vec<f64> = (0..d.n())
            .map(|i| crate::synth::linear_mu(1, &d.covariates(i)) + 0.5 * (s.dataset.outcomes()[i] - s.mean_outcome[i]))
            .collect();
        let d = d.with_outcomes(y).unwrap();
        let w = CalibrationResult::uniform(&d).weights;
        let res = fuse(&d, &w, &FusionConfig::default()).unwrap();
        assert_eq!(res.groups.m(), 1, "path {:?}", res.ebic_path);
    }

    #[test]
    fn ebic_path_is_sorted_and_minimal() {
        let s = crate::synth::generate(&crate::synth::ScenarioConfig::linear_misspecified().with_seed(6)).unwrap();
        let d = &s.dataset;
        let w = CalibrationResult::uniform(d).weights;
        let res = fuse(d, &w, &FusionConfig::default()).unwrap();
        assert!(res.ebic_path.windows(2).all(|p| p[0].lambda < p[1].lambda));
        let min = res.ebic_path.iter().map(|p| p.ebic).fold(f64::INFINITY, f64::min);
        let sel = res.ebic_path.iter().find(|p| p.lambda == res.lambda_selected).unwrap();
        assert_eq!(sel.ebic, min);
        assert_eq!(extract_groups(&res.beta, 0.25), res.groups);
    }
}
