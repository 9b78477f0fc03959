use nalgebra::{DMatrix, DVector};

use crate::linalg::solve_psd;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    /// Ridge penalty on non-intercept coefficients, per unit of the mean
    /// log-likelihood.
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            ridge: 1e-4,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Multinomial logistic regression with the last class as reference.
#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// `(m-1) × p`; the reference class has zero coefficients.
    pub coef: DMatrix<f64>,
    pub iterations: usize,
}

impl MultinomialFit {
    fn probs_row(coef: &DMatrix<f64>, x: &DMatrix<f64>, i: usize, out: &mut [f64]) {
        let m1 = coef.nrows();
        let p = coef.ncols();
        let mut max = 0.0f64;
        for c in 0..m1 {
            let mut eta = 0.0;
            for j in 0..p {
                eta += coef[(c, j)] * x[(i, j)];
            }
            out[c] = eta;
            max = max.max(eta);
        }
        out[m1] = 0.0;
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    /// Class probabilities for the listed rows, one row per unit.
    pub fn predict(&self, x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        let m = self.coef.nrows() + 1;
        let mut out = DMatrix::zeros(rows.len(), m);
        let mut buf = vec![0.0; m];
        for (r, &i) in rows.iter().enumerate() {
            Self::probs_row(&self.coef, x, i, &mut buf);
            for b in 0..m {
                out[(r, b)] = buf[b];
            }
        }
        out
    }
}

fn objective(coef: &DMatrix<f64>, x: &DMatrix<f64>, labels: &[usize], rows: &[usize], ridge: f64) -> f64 {
    let m = coef.nrows() + 1;
    let mut buf = vec![0.0; m];
    let mut nll = 0.0;
    for &i in rows {
        MultinomialFit::probs_row(coef, x, i, &mut buf);
        nll -= buf[labels[i] - 1].max(1e-300).ln();
    }
    let mut pen = 0.0;
    for c in 0..coef.nrows() {
        for j in 1..coef.ncols() {
            pen += coef[(c, j)] * coef[(c, j)];
        }
    }
    nll / rows.len() as f64 + 0.5 * ridge * pen
}

/// Fits the penalized multinomial model on `rows` by damped Newton steps.
pub fn fit_multinomial(
    x: &DMatrix<f64>,
    labels: &[usize],
    m: usize,
    rows: &[usize],
    opts: &LogisticOptions,
) -> Result<MultinomialFit> {
    if m < 2 {
        return Err(Error::Invalid("multinomial model needs at least 2 classes".into()));
    }
    if rows.is_empty() {
        return Err(Error::Empty("no rows to fit the propensity model".into()));
    }
    let p = x.ncols();
    let m1 = m - 1;
    let dim = m1 * p;
    let n = rows.len() as f64;
    let mut coef = DMatrix::zeros(m1, p);
    let mut f = objective(&coef, x, labels, rows, opts.ridge);
    let mut buf = vec![0.0; m];
    for iter in 0..opts.max_iter {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for &i in rows {
            MultinomialFit::probs_row(&coef, x, i, &mut buf);
            for c in 0..m1 {
                let resid = buf[c] - if labels[i] == c + 1 { 1.0 } else { 0.0 };
                for j in 0..p {
                    grad[c * p + j] += resid * x[(i, j)];
                }
                for d in c..m1 {
                    let h = if c == d { buf[c] * (1.0 - buf[c]) } else { -buf[c] * buf[d] };
                    if h == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        let hx = h * x[(i, j)];
                        for k in 0..p {
                            hess[(c * p + j, d * p + k)] += hx * x[(i, k)];
                        }
                    }
                }
            }
        }
        grad /= n;
        hess /= n;
        for c in 0..m1 {
            for d in 0..c {
                for j in 0..p {
                    for k in 0..p {
                        hess[(c * p + j, d * p + k)] = hess[(d * p + k, c * p + j)];
                    }
                }
            }
            for j in 1..p {
                grad[c * p + j] += opts.ridge * coef[(c, j)];
                hess[(c * p + j, c * p + j)] += opts.ridge;
            }
        }
        let gnorm = grad.amax();
        if gnorm < opts.tol {
            return Ok(MultinomialFit { coef, iterations: iter });
        }
        let step = solve_psd(&hess, &grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let mut trial = coef.clone();
            for c in 0..m1 {
                for j in 0..p {
                    trial[(c, j)] -= t * step[c * p + j];
                }
            }
            let ft = objective(&trial, x, labels, rows, opts.ridge);
            if ft <= f - 1e-4 * t * slope + 1e-13 * f.abs() {
                coef = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if gnorm < 1e-6 {
                return Ok(MultinomialFit { coef, iterations: iter });
            }
            return Err(Error::MaxIterations {
                solver: "propensity line search",
                iterations: iter,
                residual: gnorm,
            });
        }
    }
    Err(Error::MaxIterations {
        solver: "propensity",
        iterations: opts.max_iter,
        residual: f,
    })
}
