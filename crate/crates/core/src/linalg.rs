//! Small dense helpers shared by the controllers and the Koopman fit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SimError};

/// Exact zero-order-hold discretisation of `dx/dt = A x + B u` over `step`.
pub fn discretize_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, step: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * step));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * step));
    let e = aug.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| SimError::Fit("singular linear system".into()))
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| SimError::Fit("singular linear system".into()))
}

/// Moore–Penrose pseudo-inverse via SVD, discarding singular values below
/// `rel_cutoff * sigma_max`. Returns the inverse and the number discarded.
pub fn pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cut = rel_cutoff * smax;
    let mut dropped = 0;
    let inv_s = DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values.iter().map(|&s| {
            if s > cut && s > 0.0 {
                1.0 / s
            } else {
                dropped += 1;
                0.0
            }
        }),
    );
    let pinv = vt.transpose() * DMatrix::from_diagonal(&inv_s) * u.transpose();
    (pinv, dropped)
}
