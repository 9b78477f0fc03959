//! Small dense linear-algebra helpers shared by the regression solvers.

use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` for symmetric positive semidefinite `a`.
///
/// When the Cholesky factorization fails the diagonal is jittered by a
/// growing multiple of the mean diagonal until it succeeds.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(b);
    }
    let p = a.nrows().max(1);
    let scale = (a.trace() / p as f64).abs().max(1.0);
    let mut jitter = 1e-10 * scale;
    loop {
        let mut shifted = a.clone();
        for j in 0..a.nrows() {
            shifted[(j, j)] += jitter;
        }
        if let Some(chol) = shifted.cholesky() {
            return chol.solve(b);
        }
        jitter *= 10.0;
    }
}

/// Inverse of a symmetric positive semidefinite matrix with the same jitter
/// fallback as [`solve_psd`].
pub fn inverse_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    let identity = DMatrix::<f64>::identity(n, n);
    if let Some(chol) = a.clone().cholesky() {
        return chol.inverse();
    }
    for j in 0..n {
        let col = solve_psd(a, &identity.column(j).into_owned());
        out.set_column(j, &col);
    }
    out
}

/// Accumulates `Σ w_i x_i x_iᵀ` and `Σ w_i x_i y_i` over the listed rows.
pub fn weighted_normal_equations(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    rows: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let p = x.ncols();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for &i in rows {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for j in 0..p {
            let xij = x[(i, j)] * w;
            rhs[j] += xij * y[i];
            for k in j..p {
                gram[(j, k)] += xij * x[(i, k)];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            gram[(j, k)] = gram[(k, j)];
        }
    }
    (gram, rhs)
}

/// Weighted least squares restricted to `rows`, with an optional ridge
/// penalty on every coefficient except the first (the intercept).
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    rows: &[usize],
    ridge: f64,
) -> DVector<f64> {
    let (mut gram, rhs) = weighted_normal_equations(x, y, weights, rows);
    for j in 1..gram.nrows() {
        gram[(j, j)] += ridge;
    }
    solve_psd(&gram, &rhs)
}

pub fn row_dot(x: &DMatrix<f64>, i: usize, beta: &[f64]) -> f64 {
    beta.iter().enumerate().map(|(j, b)| x[(i, j)] * b).sum()
}
