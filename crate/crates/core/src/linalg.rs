//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative ridge added to a Gram matrix that fails to factor.
pub const RIDGE_FLOOR: f64 = 1e-10;

/// Outcome of a symmetric positive (semi)definite solve.
#[derive(Clone, Debug)]
pub struct SpdSolve {
    pub solution: DMatrix<f64>,
    /// Ridge actually added to the diagonal (0 when the plain factorization
    /// succeeded).
    pub ridge: f64,
}

/// Reciprocal condition estimate of a symmetric matrix after diagonal
/// scaling: `lambda_min / lambda_max` of `D^{-1/2} A D^{-1/2}`.
pub fn scaled_rcond(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return 0.0;
    }
    let s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = SymmetricEigen::new(s);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 {
        0.0
    } else {
        (min / max).max(0.0)
    }
}

/// Solves `A X = B` for symmetric `A`. Tries a plain Cholesky factorization
/// first; if `A` is numerically singular (`scaled_rcond < rcond_min`) or the
/// factorization fails, retries with `ridge_rel * trace(A) / n` on the
/// diagonal. Returns `None` when even that fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond_min: f64, ridge_rel: f64) -> Option<SpdSolve> {
    let n = a.nrows();
    let healthy = rcond_min <= 0.0 || scaled_rcond(a) >= rcond_min;
    if healthy {
        if let Some(ch) = a.clone().cholesky() {
            return Some(SpdSolve { solution: ch.solve(b), ridge: 0.0 });
        }
    }
    let ridge = ridge_rel * a.trace() / n.max(1) as f64;
    if !(ridge > 0.0) {
        return None;
    }
    let mut r = a.clone();
    for i in 0..n {
        r[(i, i)] += ridge;
    }
    r.cholesky().map(|ch| SpdSolve { solution: ch.solve(b), ridge })
}

pub fn solve_spd_vec(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rcond_min: f64,
    ridge_rel: f64,
) -> Option<(DVector<f64>, f64)> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    solve_spd(a, &bm, rcond_min, ridge_rel).map(|s| (s.solution.column(0).into_owned(), s.ridge))
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// `A^{-1}` and `A^{-1/2}` of a symmetric matrix, with eigenvalues floored at
/// `floor_rel` times their mean.
pub fn inverse_and_inverse_sqrt(a: &DMatrix<f64>, floor_rel: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mean = eig.eigenvalues.iter().sum::<f64>() / n as f64;
    let floor = (floor_rel * mean.abs()).max(f64::MIN_POSITIVE);
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(floor)).collect();
    let q = &eig.eigenvectors;
    let mut inv = DMatrix::zeros(n, n);
    let mut inv_sqrt = DMatrix::zeros(n, n);
    for (k, &v) in vals.iter().enumerate() {
        let col = q.column(k);
        inv += (col * col.transpose()) / v;
        inv_sqrt += (col * col.transpose()) / v.sqrt();
    }
    (inv, inv_sqrt)
}
