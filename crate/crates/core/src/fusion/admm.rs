//! ADMM for the weighted least-squares loss with pairwise fusion penalties.
//!
//! Splitting variables `δ_{ab} = β_a − β_b` (a < b) separate the penalty from
//! the loss. The β-step couples arms only through the sum `Σ_a β_a` (the
//! pair graph is complete), so it reduces to K independent p×p solves plus
//! one p×p system for the sum.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::penalty::PenaltySpec;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{inverse_psd, solve_psd, weighted_normal_equations};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    /// Initial augmented-Lagrangian parameter.
    pub rho: f64,
    /// Absolute tolerance on both the primal and dual residual norms.
    pub tol: f64,
    pub max_iter: usize,
    /// Rebalance `rho` when one residual exceeds the other by this ratio.
    pub balance_ratio: f64,
    pub balance_factor: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            tol: 1e-5,
            max_iter: 5000,
            balance_ratio: 10.0,
            balance_factor: 2.0,
        }
    }
}

/// Per-arm sufficient statistics of the weighted loss
/// `(1/2n) Σ_a Σ_{i in a} w_i (ỹ_i − x_iᵀ β_a)²`.
#[derive(Debug, Clone)]
pub struct FusionProblem {
    k: usize,
    p: usize,
    grams: Vec<DMatrix<f64>>,
    cross: Vec<DVector<f64>>,
    yy: f64,
    /// Internal rescaling of the whole objective; keeps per-arm curvature
    /// O(1) whatever the weight normalization.
    scale: f64,
    observed: Vec<bool>,
}

impl FusionProblem {
    pub fn new(d: &Dataset, ytilde: &[f64], weights: &[f64]) -> Result<Self> {
        let n = d.n();
        if ytilde.len() != n {
            return Err(Error::Dimension { expected: n, got: ytilde.len() });
        }
        if weights.len() != n {
            return Err(Error::Dimension { expected: n, got: weights.len() });
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Invalid("fusion weights must be finite and non-negative".into()));
        }
        let rows = d.rows_by_arm();
        let inv_n = 1.0 / n as f64;
        let mut grams = Vec::with_capacity(d.k());
        let mut cross = Vec::with_capacity(d.k());
        let mut observed = Vec::with_capacity(d.k());
        for (arm, arm_rows) in rows.iter().enumerate() {
            if !arm_rows.is_empty() && arm_rows.len() < d.p() {
                log::warn!("arm {} has {} units for {} coefficients; relying on fusion to regularize it", arm + 1, arm_rows.len(), d.p());
            }
            let (g, c) = weighted_normal_equations(d.x(), ytilde, weights, arm_rows);
            grams.push(g * inv_n);
            cross.push(c * inv_n);
            observed.push(!arm_rows.is_empty());
        }
        let yy = weights.iter().zip(ytilde).map(|(w, y)| w * y * y).sum::<f64>() * inv_n;
        let total_w: f64 = weights.iter().sum();
        let k_obs = observed.iter().filter(|&&o| o).count().max(1);
        let scale = if total_w > 0.0 { n as f64 * k_obs as f64 / total_w } else { 1.0 };
        Ok(Self { k: d.k(), p: d.p(), grams, cross, yy, scale, observed })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_observed(&self, arm: usize) -> bool {
        self.observed[arm]
    }

    /// Weighted least-squares loss at `beta` (K×p).
    pub fn loss(&self, beta: &DMatrix<f64>) -> f64 {
        let mut total = self.yy;
        for a in 0..self.k {
            let b = beta.row(a).transpose();
            total += (b.transpose() * &self.grams[a] * &b)[(0, 0)] - 2.0 * self.cross[a].dot(&b);
        }
        0.5 * total
    }

    pub fn penalty(&self, beta: &DMatrix<f64>, pen: &PenaltySpec) -> f64 {
        let mut total = 0.0;
        for a in 0..self.k {
            for b in a + 1..self.k {
                for j in 0..self.p {
                    total += pen.value(beta[(a, j)] - beta[(b, j)]);
                }
            }
        }
        total
    }

    /// Exact objective with `δ` set to the pairwise differences of `beta`.
    pub fn objective(&self, beta: &DMatrix<f64>, pen: &PenaltySpec) -> f64 {
        self.loss(beta) + self.penalty(beta, pen)
    }

    /// Per-arm weighted least squares (the unpenalized minimizer).
    pub fn separate_fit(&self) -> DMatrix<f64> {
        let mut beta = DMatrix::zeros(self.k, self.p);
        for a in 0..self.k {
            let b = solve_psd(&self.grams[a], &self.cross[a]);
            beta.set_row(a, &b.transpose());
        }
        beta
    }

    /// Single weighted least-squares fit shared by all arms.
    pub fn pooled_fit(&self) -> DVector<f64> {
        let g = self.grams.iter().fold(DMatrix::zeros(self.p, self.p), |acc, g| acc + g);
        let c = self.cross.iter().fold(DVector::zeros(self.p), |acc, c| acc + c);
        solve_psd(&g, &c)
    }

    /// Smallest lambda at which the fully fused point satisfies the l1
    /// optimality conditions: `max_{a,b} ‖g_a − g_b‖_∞ / K`, with `g_a` the
    /// arm loss gradients at the pooled fit.
    pub fn l1_fusion_bound(&self) -> f64 {
        let pooled = self.pooled_fit();
        let grads: Vec<DVector<f64>> = (0..self.k).map(|a| &self.grams[a] * &pooled - &self.cross[a]).collect();
        let mut bound = 0.0f64;
        for a in 0..self.k {
            for b in a + 1..self.k {
                bound = bound.max((&grads[a] - &grads[b]).amax());
            }
        }
        bound / self.k as f64
    }
}

/// Iterate carried between fits along a lambda path.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub beta: DMatrix<f64>,
    delta: Vec<f64>,
    u: Vec<f64>,
    rho: f64,
}

#[derive(Debug, Clone)]
pub struct AdmmFit {
    /// Best iterate by exact objective (K×p).
    pub beta: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Exact objective at each iterate's β.
    pub trace: Vec<f64>,
    pub state: AdmmState,
}

fn pair_count(k: usize) -> usize {
    k * (k.saturating_sub(1)) / 2
}

pub fn weighted_fused_fit(
    problem: &FusionProblem,
    pen: &PenaltySpec,
    cfg: &AdmmConfig,
    warm: Option<&AdmmState>,
) -> Result<AdmmFit> {
    if pen.lambda.is_nan() || pen.lambda < 0.0 {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {}", pen.lambda)));
    }
    let (k, p) = (problem.k, problem.p);
    let m = pair_count(k);
    let s = problem.scale;
    let pen_internal = pen.with_lambda(pen.lambda * s);
    let grams: Vec<DMatrix<f64>> = problem.grams.iter().map(|g| g * s).collect();
    let cross: Vec<DVector<f64>> = problem.cross.iter().map(|c| c * s).collect();

    let mut state = match warm {
        Some(w) if w.beta.shape() == (k, p) && w.delta.len() == m * p => w.clone(),
        _ => {
            let beta = problem.separate_fit();
            let mut delta = vec![0.0; m * p];
            let mut idx = 0;
            for a in 0..k {
                for b in a + 1..k {
                    for j in 0..p {
                        delta[idx * p + j] = beta[(a, j)] - beta[(b, j)];
                    }
                    idx += 1;
                }
            }
            AdmmState { beta, delta, u: vec![0.0; m * p], rho: cfg.rho }
        }
    };

    let factor = |rho: f64| -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let hinv: Vec<DMatrix<f64>> = grams
            .iter()
            .map(|g| {
                let mut h = g.clone();
                for j in 0..p {
                    h[(j, j)] += rho * k as f64;
                }
                inverse_psd(&h)
            })
            .collect();
        let sum = hinv.iter().fold(DMatrix::zeros(p, p), |acc, h| acc + h);
        let system = DMatrix::identity(p, p) - sum * rho;
        (hinv, system)
    };
    let (mut hinv, mut system) = factor(state.rho);

    let mut best_beta = state.beta.clone();
    let mut best_obj = problem.objective(&state.beta, pen);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut iterations = 0;
    let mut rhs = vec![DVector::<f64>::zeros(p); k];
    let mut delta_old = vec![0.0; m * p];
    let mut since_rebalance = 0usize;

    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        let rho = state.rho;

        // β-step
        for (a, r) in rhs.iter_mut().enumerate() {
            r.copy_from(&cross[a]);
        }
        let mut idx = 0;
        for a in 0..k {
            for b in a + 1..k {
                for j in 0..p {
                    let v = rho * (state.delta[idx * p + j] - state.u[idx * p + j]);
                    rhs[a][j] += v;
                    rhs[b][j] -= v;
                }
                idx += 1;
            }
        }
        let solved: Vec<DVector<f64>> = if k >= 32 {
            hinv.par_iter().zip(rhs.par_iter()).map(|(h, r)| h * r).collect()
        } else {
            hinv.iter().zip(&rhs).map(|(h, r)| h * r).collect()
        };
        let t = solved.iter().fold(DVector::zeros(p), |acc, v| acc + v);
        let total = solve_psd(&system, &t);
        for a in 0..k {
            let b = &solved[a] + &hinv[a] * &total * rho;
            state.beta.set_row(a, &b.transpose());
        }

        // δ-step and dual update
        delta_old.copy_from_slice(&state.delta);
        let mut primal_sq = 0.0;
        let mut idx = 0;
        for a in 0..k {
            for b in a + 1..k {
                for j in 0..p {
                    let slot = idx * p + j;
                    let diff = state.beta[(a, j)] - state.beta[(b, j)];
                    let d = pen_internal.prox(diff + state.u[slot], rho);
                    state.delta[slot] = d;
                    state.u[slot] += diff - d;
                    primal_sq += (diff - d) * (diff - d);
                }
                idx += 1;
            }
        }
        // Dual residual: rho * Dᵀ(δ − δ_old), accumulated per arm.
        let mut dual_vec = vec![0.0; k * p];
        let mut idx = 0;
        for a in 0..k {
            for b in a + 1..k {
                for j in 0..p {
                    let change = state.delta[idx * p + j] - delta_old[idx * p + j];
                    dual_vec[a * p + j] += change;
                    dual_vec[b * p + j] -= change;
                }
                idx += 1;
            }
        }
        primal = primal_sq.sqrt();
        dual = rho * dual_vec.iter().map(|v| v * v).sum::<f64>().sqrt();

        let obj = problem.objective(&state.beta, pen);
        trace.push(obj);
        if obj <= best_obj || !best_obj.is_finite() {
            best_obj = obj;
            best_beta.copy_from(&state.beta);
        }
        if primal <= cfg.tol && dual <= cfg.tol {
            converged = true;
            break;
        }

        since_rebalance += 1;
        if since_rebalance >= 10 {
            let new_rho = if primal > cfg.balance_ratio * dual {
                Some(rho * cfg.balance_factor)
            } else if dual > cfg.balance_ratio * primal {
                Some(rho / cfg.balance_factor)
            } else {
                None
            };
            if let Some(new_rho) = new_rho {
                let ratio = rho / new_rho;
                state.u.iter_mut().for_each(|u| *u *= ratio);
                state.rho = new_rho;
                (hinv, system) = factor(new_rho);
                since_rebalance = 0;
            }
        }
    }

    // At convergence the last iterate is the answer; otherwise fall back to
    // the best one seen.
    let beta = if converged { state.beta.clone() } else { best_beta };
    let objective = problem.objective(&beta, pen);
    if !converged {
        log::warn!(
            "fusion ADMM stopped after {iterations} iterations (primal {primal:.2e}, dual {dual:.2e}, lambda {})",
            pen.lambda
        );
    }
    Ok(AdmmFit { beta, objective, iterations, converged, primal_residual: primal, dual_residual: dual, trace, state })
}
