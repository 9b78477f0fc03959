//! Per-arm calibration weights.
//!
//! For each arm the weights minimize a Cressie–Read discrepancy from the
//! uniform distribution subject to the weighted covariate mean matching a
//! target (the pooled sample mean) and the weights summing to one. The
//! problem is solved through its Lagrangian dual: with `z_i = x_i - target`,
//! the weights take the form `w_i ∝ ρ_γ(λᵀ z_i)` where `λ` is the root of
//! `Σ_i ρ_γ(λᵀ z_i) z_i = 0`. That root is the minimizer of the convex
//! function `F(λ) = Σ_i R_γ(λᵀ z_i)` with `R_γ' = ρ_γ`, which we minimize by
//! damped Newton.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Member of the Cressie–Read family, indexed by `gamma`.
///
/// | gamma | rho(x)                |
/// |-------|-----------------------|
/// | -1    | `1 / (1 - x)`         |
/// | 0     | `exp(x)`              |
/// | other | `(1 + gamma x)^(1/gamma)` |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CressieRead {
    pub gamma: f64,
}

impl Default for CressieRead {
    fn default() -> Self {
        Self { gamma: 0.0 }
    }
}

impl CressieRead {
    pub fn new(gamma: f64) -> Self {
        Self { gamma }
    }

    fn is_entropy(&self) -> bool {
        self.gamma == 0.0
    }

    fn is_empirical_likelihood(&self) -> bool {
        self.gamma == -1.0
    }

    pub fn in_domain(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        if self.is_entropy() {
            true
        } else if self.is_empirical_likelihood() {
            x < 1.0
        } else {
            1.0 + self.gamma * x > 0.0
        }
    }

    /// Tilting function `ρ_γ(x)`.
    pub fn rho(&self, x: f64) -> Result<f64> {
        if !self.in_domain(x) {
            return Err(Error::DomainViolation { gamma: self.gamma, value: x });
        }
        Ok(self.rho_unchecked(x))
    }

    fn rho_unchecked(&self, x: f64) -> f64 {
        if self.is_entropy() {
            x.exp()
        } else if self.is_empirical_likelihood() {
            1.0 / (1.0 - x)
        } else {
            (1.0 + self.gamma * x).powf(1.0 / self.gamma)
        }
    }

    fn rho_prime(&self, x: f64) -> f64 {
        if self.is_entropy() {
            x.exp()
        } else if self.is_empirical_likelihood() {
            (1.0 - x).powi(-2)
        } else {
            (1.0 + self.gamma * x).powf(1.0 / self.gamma - 1.0)
        }
    }

    /// Antiderivative of `ρ_γ`, the dual objective's per-unit term.
    fn rho_integral(&self, x: f64) -> f64 {
        if self.is_entropy() {
            x.exp()
        } else if self.is_empirical_likelihood() {
            -(1.0 - x).ln()
        } else {
            (1.0 + self.gamma * x).powf(1.0 / self.gamma + 1.0) / (1.0 + 1.0 / self.gamma) / self.gamma
        }
    }

    /// Discrepancy `Σ h_γ(w_i)` of normalized weights from uniform.
    pub fn discrepancy(&self, weights: &[f64]) -> f64 {
        let n = weights.len() as f64;
        weights
            .iter()
            .map(|&w| {
                let nw = n * w;
                if self.is_entropy() {
                    nw * nw.ln()
                } else if self.is_empirical_likelihood() {
                    -nw.ln()
                } else {
                    (nw.powf(self.gamma + 1.0) - 1.0) / (self.gamma * (self.gamma + 1.0))
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Any single weight above this is treated as a positivity failure.
    pub max_weight: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            max_weight: 0.9,
        }
    }
}

/// Divergence choice and solver settings in one serializable block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_weight: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            gamma: CressieRead::default().gamma,
            tol: o.tol,
            max_iter: o.max_iter,
            max_weight: o.max_weight,
        }
    }
}

impl CalibrationConfig {
    pub fn spec(&self) -> CressieRead {
        CressieRead::new(self.gamma)
    }

    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            max_weight: self.max_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmCalibration {
    pub weights: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Max-abs violation of the weighted mean constraint.
    pub residual: f64,
    pub iterations: usize,
}

/// Weights `ρ(λᵀ z_i) / Σ_j ρ(λᵀ z_j)` for a given dual vector.
pub fn weights_from_dual(z: &DMatrix<f64>, target: &[f64], lambda: &[f64], spec: CressieRead) -> Result<Vec<f64>> {
    let raw: Vec<f64> = (0..z.nrows())
        .map(|i| {
            let t: f64 = lambda.iter().enumerate().map(|(j, l)| l * (z[(i, j)] - target[j])).sum();
            spec.rho(t)
        })
        .collect::<Result<_>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Max-abs deviation of `Σ w_i x_i` from `target`.
pub fn moment_residual(x: &DMatrix<f64>, target: &[f64], weights: &[f64]) -> f64 {
    (0..x.ncols())
        .map(|j| {
            let m: f64 = weights.iter().enumerate().map(|(i, w)| w * x[(i, j)]).sum();
            (m - target[j]).abs()
        })
        .fold(0.0, f64::max)
}

/// Calibrates one arm. `x_arm` holds the balancing covariates only (no
/// intercept column; the sum-to-one constraint plays that role).
pub fn solve_arm(x_arm: &DMatrix<f64>, target: &[f64], spec: CressieRead, opts: SolverOptions) -> Result<ArmCalibration> {
    let (n, q) = x_arm.shape();
    if n < 2 {
        return Err(Error::Invalid(format!("calibration needs at least 2 units, got {n}")));
    }
    if target.len() != q {
        return Err(Error::Dimension { expected: q, got: target.len() });
    }
    let z = DMatrix::from_fn(n, q, |i, j| x_arm[(i, j)] - target[j]);
    let mut lambda = DVector::<f64>::zeros(q);
    let mut t = vec![0.0; n];

    let objective = |t: &[f64]| -> Option<f64> {
        if t.iter().any(|&v| !spec.in_domain(v)) {
            return None;
        }
        let f: f64 = t.iter().map(|&v| spec.rho_integral(v)).sum();
        f.is_finite().then_some(f)
    };
    let tilt = |lambda: &DVector<f64>, t: &mut [f64]| {
        for (i, ti) in t.iter_mut().enumerate() {
            *ti = (0..q).map(|j| lambda[j] * z[(i, j)]).sum();
        }
    };

    let mut f = objective(&t).expect("lambda = 0 is always feasible");
    for iter in 0..=opts.max_iter {
        let rho: Vec<f64> = t.iter().map(|&v| spec.rho_unchecked(v)).collect();
        let total: f64 = rho.iter().sum();
        let mut grad = DVector::<f64>::zeros(q);
        let mut hess = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let d = spec.rho_prime(t[i]);
            for j in 0..q {
                grad[j] += rho[i] * z[(i, j)];
                for k in j..q {
                    hess[(j, k)] += d * z[(i, j)] * z[(i, k)];
                }
            }
        }
        for j in 0..q {
            for k in 0..j {
                hess[(j, k)] = hess[(k, j)];
            }
        }
        let residual = grad.amax() / total;
        if residual <= opts.tol {
            let weights: Vec<f64> = rho.iter().map(|r| r / total).collect();
            let max_w = weights.iter().copied().fold(0.0, f64::max);
            if max_w > opts.max_weight {
                return Err(Error::NoOverlap(format!("weight {max_w:.3} exceeds {}", opts.max_weight)));
            }
            return Ok(ArmCalibration {
                residual: moment_residual(x_arm, target, &weights),
                weights,
                lambda: lambda.iter().copied().collect(),
                iterations: iter,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::MaxIterations { solver: "calibration dual Newton", iterations: iter, residual });
        }

        let direction = newton_direction(&hess, &grad);
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        let mut trial = vec![0.0; n];
        let accepted = loop {
            let candidate = &lambda + &direction * step;
            tilt(&candidate, &mut trial);
            if let Some(f_new) = objective(&trial) {
                // The slack absorbs rounding in F once the decrease predicted
                // by the slope falls below machine precision.
                if f_new <= f + 1e-4 * step * slope + 1e-13 * f.abs() {
                    break Some((candidate, f_new));
                }
            }
            step *= 0.5;
            if step < 1e-12 {
                break None;
            }
        };
        let Some((candidate, f_new)) = accepted else {
            if spec.is_entropy() || spec.gamma < 0.0 {
                return Err(Error::NoOverlap(format!("line search stalled at residual {residual:.3e}")));
            }
            // For gamma > 0 the dual is finite on the domain boundary; a stall
            // means the optimum wants weights that are not positive.
            return Err(Error::DomainViolation { gamma: spec.gamma, value: t.iter().copied().fold(f64::INFINITY, f64::min) });
        };
        lambda = candidate;
        std::mem::swap(&mut t, &mut trial);
        f = f_new;
        if t.iter().any(|v| v.abs() > 500.0) {
            return Err(Error::NoOverlap(format!("dual diverged (|λᵀz| > 500) at residual {residual:.3e}")));
        }
    }
    unreachable!("loop returns on the final iteration")
}

/// Newton step with a gradient fallback on the numerically null subspace of
/// the Hessian (condition number above 1e12).
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = hess.clone().cholesky() {
        let eig_max = hess.diagonal().amax();
        let diag_min = chol.l().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        if diag_min > eig_max * 1e-12 {
            return -chol.solve(grad);
        }
    }
    let eig = SymmetricEigen::new(hess.clone());
    let top = eig.eigenvalues.amax();
    let mut dir = DVector::zeros(grad.len());
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let coef = v.dot(grad);
        let scale = if ev > top * 1e-12 { 1.0 / ev } else { 1.0 / top.max(1e-300) };
        dir -= v * (coef * scale);
    }
    dir
}

/// Calibration weights for every arm of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Per-unit weights; each arm's weights sum to one.
    pub weights: Vec<f64>,
    /// Balancing columns (design-matrix indices).
    pub columns: Vec<usize>,
    /// Dual vector per arm (empty for unobserved arms).
    pub lambda: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl CalibrationResult {
    /// Uniform within-arm weights `1 / n_a`, i.e. no calibration.
    pub fn uniform(d: &Dataset) -> Self {
        let sizes = crate::dataset::arm_sizes(d);
        Self {
            weights: d.treatments().iter().map(|&a| 1.0 / sizes[a - 1] as f64).collect(),
            columns: Vec::new(),
            lambda: vec![Vec::new(); d.k()],
            residual: vec![0.0; d.k()],
            iterations: vec![0; d.k()],
        }
    }
}

/// Solves every arm against the pooled mean of `columns` (all non-intercept
/// columns when empty). Arms are solved in parallel.
pub fn calibrate_all(d: &Dataset, spec: CressieRead, columns: &[usize], opts: SolverOptions) -> Result<CalibrationResult> {
    let columns: Vec<usize> = if columns.is_empty() { (1..d.p()).collect() } else { columns.to_vec() };
    if let Some(&bad) = columns.iter().find(|&&j| j == 0 || j >= d.p()) {
        return Err(Error::Invalid(format!("calibration column {bad} is not a covariate column")));
    }
    let means = d.column_means();
    let target: Vec<f64> = columns.iter().map(|&j| means[j]).collect();
    let rows = d.rows_by_arm();
    let solved: Vec<Result<Option<ArmCalibration>>> = rows
        .par_iter()
        .enumerate()
        .map(|(arm, rows)| {
            if rows.is_empty() {
                return Ok(None);
            }
            let x_arm = DMatrix::from_fn(rows.len(), columns.len(), |i, j| d.x()[(rows[i], columns[j])]);
            solve_arm(&x_arm, &target, spec, opts)
                .map(Some)
                .map_err(|e| Error::Arm { arm: arm + 1, source: Box::new(e) })
        })
        .collect();

    let mut result = CalibrationResult {
        weights: vec![0.0; d.n()],
        columns,
        lambda: Vec::with_capacity(d.k()),
        residual: Vec::with_capacity(d.k()),
        iterations: Vec::with_capacity(d.k()),
    };
    for (arm_rows, solved) in rows.iter().zip(solved) {
        match solved? {
            Some(arm) => {
                for (&i, &w) in arm_rows.iter().zip(&arm.weights) {
                    result.weights[i] = w;
                }
                result.lambda.push(arm.lambda);
                result.residual.push(arm.residual);
                result.iterations.push(arm.iterations);
            }
            None => {
                result.lambda.push(Vec::new());
                result.residual.push(0.0);
                result.iterations.push(0);
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rho_table() {
        assert_eq!(CressieRead::new(0.0).rho(0.0).unwrap(), 1.0);
        assert!((CressieRead::new(-1.0).rho(0.5).unwrap() - 2.0).abs() < 1e-15);
        assert!((CressieRead::new(1.0).rho(0.5).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(CressieRead::new(-1.0).rho(1.0), Err(Error::DomainViolation { .. })));
        assert!(matches!(CressieRead::new(1.0).rho(-1.0), Err(Error::DomainViolation { .. })));
        for g in [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
            assert!((CressieRead::new(g).rho(0.0).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn integral_differentiates_to_rho() {
        for g in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let s = CressieRead::new(g);
            for x in [-0.3, 0.0, 0.2] {
                let h = 1e-6;
                let fd = (s.rho_integral(x + h) - s.rho_integral(x - h)) / (2.0 * h);
                assert!((fd - s.rho(x).unwrap()).abs() < 1e-6, "gamma {g} x {x}");
                let fd2 = (s.rho_unchecked(x + h) - s.rho_unchecked(x - h)) / (2.0 * h);
                assert!((fd2 - s.rho_prime(x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rows_at_target_give_uniform_weights() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let sol = solve_arm(&x, &[1.0, 2.0], CressieRead::default(), SolverOptions::default()).unwrap();
        assert!(sol.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
        assert!(sol.lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn symmetric_pair() {
        let x = DMatrix::from_row_slice(2, 1, &[-0.7, 1.3]);
        let sol = solve_arm(&x, &[0.3], CressieRead::default(), SolverOptions::default()).unwrap();
        assert!((sol.weights[0] - 0.5).abs() < 1e-12);
    }

    /// Independent route: bisection on the scalar dual equation
    /// `Σ exp(λ z_i) z_i = 0`, which is increasing in λ.
    fn bisect_dual(values: &[f64], target: f64) -> f64 {
        let g = |l: f64| values.iter().map(|v| (l * (v - target)).exp() * (v - target)).sum::<f64>();
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn exponential_tilt_matches_bisection() {
        let values = [0.0, 1.0, 2.0];
        let lam = bisect_dual(&values, 0.5);
        let raw: Vec<f64> = values.iter().map(|v| (lam * (v - 0.5)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let x = DMatrix::from_row_slice(3, 1, &values);
        let sol = solve_arm(&x, &[0.5], CressieRead::default(), SolverOptions::default()).unwrap();
        assert!((sol.lambda[0] - lam).abs() < 1e-8);
        for (w, r) in sol.weights.iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-10);
        }
        // Frozen from an offline Brent root solve of the same scalar dual.
        assert!((sol.weights[0] - 0.616_204_060_378_001).abs() < 1e-10, "{:?}", sol.weights);
        assert!((sol.lambda[0] + 0.834_115_194_352_401).abs() < 1e-8);
    }

    #[test]
    fn target_outside_hull_is_no_overlap() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let err = solve_arm(&x, &[3.0], CressieRead::default(), SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoOverlap(_)), "{err:?}");
        let err = solve_arm(&x, &[1.95], CressieRead::default(), SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoOverlap(_)), "{err:?}");
        let constant = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let err = solve_arm(&constant, &[0.6], CressieRead::default(), SolverOptions::default()).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Solver);
    }

    #[test]
    fn linear_calibration_domain_violation() {
        // Chi-square weights for this target would have to go negative.
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 10.0]);
        let err = solve_arm(&x, &[9.0], CressieRead::new(1.0), SolverOptions { max_weight: 1.0, ..Default::default() }).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Solver, "{err:?}");
    }

    #[test]
    fn degenerate_direction_is_handled() {
        // The second covariate is constant and already on target.
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        let sol = solve_arm(&x, &[1.2, 1.0], CressieRead::default(), SolverOptions::default()).unwrap();
        assert!(sol.residual < 1e-8);
    }

    #[test]
    fn calibrate_all_balances_every_arm() {
        let s = crate::synth::generate(&crate::synth::ScenarioConfig::nonlinear(16).with_seed(11)).unwrap();
        let d = &s.dataset;
        let res = calibrate_all(d, CressieRead::default(), &[], SolverOptions::default()).unwrap();
        let means = d.column_means();
        for rows in d.rows_by_arm() {
            let total: f64 = rows.iter().map(|&i| res.weights[i]).sum();
            assert!((total - 1.0).abs() < 1e-10);
            for j in 1..d.p() {
                let m: f64 = rows.iter().map(|&i| res.weights[i] * d.x()[(i, j)]).sum();
                assert!((m - means[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn subset_leaves_excluded_column_unbalanced() {
        let s = crate::synth::generate(&crate::synth::ScenarioConfig::linear_misspecified().with_seed(2)).unwrap();
        let d = &s.dataset;
        let res = calibrate_all(d, CressieRead::default(), &[2, 3], SolverOptions::default()).unwrap();
        let means = d.column_means();
        let rows = d.arm_rows(1);
        let wmean = |j: usize| rows.iter().map(|&i| res.weights[i] * d.x()[(i, j)]).sum::<f64>();
        assert!((wmean(2) - means[2]).abs() < 1e-8);
        assert!((wmean(3) - means[3]).abs() < 1e-8);
        assert!((wmean(1) - means[1]).abs() > 1e-3);
    }

    #[test]
    fn identical_arms_stay_uniform() {
        let base = [0.0, 1.0, 2.0, 5.0];
        let cov: Vec<f64> = base.iter().chain(&base).copied().collect();
        let x = DMatrix::from_column_slice(8, 1, &cov);
        let d = Dataset::from_covariates(&x, vec![1, 1, 1, 1, 2, 2, 2, 2], vec![0.0; 8], vec!["x".into()], None).unwrap();
        let res = calibrate_all(&d, CressieRead::default(), &[], SolverOptions::default()).unwrap();
        assert!(res.weights.iter().all(|&w| (w - 0.25).abs() < 1e-12));
    }

    #[test]
    fn single_unit_arm_is_tagged() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 2.0, 1.0]);
        let d = Dataset::from_covariates(&x, vec![1, 1, 2], vec![0.0; 3], vec!["x".into()], None).unwrap();
        let err = calibrate_all(&d, CressieRead::default(), &[], SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Arm { arm: 2, .. }));
    }

    /// Entropy objective minimized directly: gradient steps projected onto
    /// the affine constraint set, starting from the least-squares feasible
    /// point and kept strictly positive.
    fn primal_projected_gradient(x: &DMatrix<f64>, target: &[f64]) -> Option<Vec<f64>> {
        let (n, q) = x.shape();
        let a = DMatrix::from_fn(q + 1, n, |r, i| if r == 0 { 1.0 } else { x[(i, r - 1)] });
        let mut b = DVector::zeros(q + 1);
        b[0] = 1.0;
        for j in 0..q {
            b[j + 1] = target[j];
        }
        let aat_inv = (&a * a.transpose()).try_inverse()?;
        let project = |v: &DVector<f64>| v - a.transpose() * (&aat_inv * (&a * v));
        let uniform = DVector::from_element(n, 1.0 / n as f64);
        let mut w = &uniform + a.transpose() * (&aat_inv * (&b - &a * &uniform));
        if w.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let h = |w: &DVector<f64>| w.iter().map(|&v| n as f64 * v * (n as f64 * v).ln()).sum::<f64>();
        for _ in 0..20_000 {
            let grad = DVector::from_iterator(n, w.iter().map(|&v| n as f64 * ((n as f64 * v).ln() + 1.0)));
            let d = -project(&grad);
            if d.norm() < 1e-13 {
                break;
            }
            let mut step = 1.0 / (n * n) as f64;
            while (0..n).any(|i| w[i] + step * d[i] <= 0.0) || h(&(&w + &d * step)) > h(&w) {
                step *= 0.5;
                if step < 1e-18 {
                    break;
                }
            }
            w += d * step;
        }
        Some(w.iter().copied().collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn entropy_weights_are_optimal(
            n in 4usize..=20,
            seed in 0u64..1000,
        ) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0);
            let v: Vec<f64> = (0..n).map(|_| 0.7 + 0.6 * rng.random::<f64>()).collect();
            let vs: f64 = v.iter().sum();
            let target: Vec<f64> = (0..2).map(|j| (0..n).map(|i| v[i] / vs * x[(i, j)]).sum()).collect();
            let spec = CressieRead::default();
            let sol = solve_arm(&x, &target, spec, SolverOptions::default()).unwrap();
            if let Some(primal) = primal_projected_gradient(&x, &target) {
                prop_assert!(moment_residual(&x, &target, &primal) < 1e-9);
                prop_assert!(spec.discrepancy(&sol.weights) <= spec.discrepancy(&primal) + 1e-6);
            }
            let replay = weights_from_dual(&x, &target, &sol.lambda, spec).unwrap();
            for (a, b) in replay.iter().zip(&sol.weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_approach_uniform_as_shift_vanishes(seed in 0u64..200) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 50;
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
            let mean: Vec<f64> = (0..2).map(|j| x.column(j).mean()).collect();
            let mut last = f64::INFINITY;
            for shift in [0.1, 0.01, 0.001] {
                let target: Vec<f64> = mean.iter().map(|m| m + shift).collect();
                let sol = solve_arm(&x, &target, CressieRead::default(), SolverOptions::default()).unwrap();
                let dev = sol.weights.iter().map(|w| (n as f64 * w - 1.0).abs()).fold(0.0, f64::max);
                prop_assert!(dev < last);
                last = dev;
            }
            prop_assert!(last < 0.05);
        }
    }
}
