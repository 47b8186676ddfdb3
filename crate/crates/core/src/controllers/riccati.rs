//! Algebraic Riccati equations for the LQR/LQG controller.

use nalgebra::DMatrix;

use crate::error::{Result, SimError};
use crate::linalg::solve;

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    /// Optimal feedback `u = -K x`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

const MAX_DOUBLING: usize = 200;
const MAX_NEWTON: usize = 100;

/// Discrete ARE `P = A'PA - A'PB (R + B'PB)^{-1} B'PA + Q` by structure-
/// preserving doubling.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * solve(r, &b.transpose())?;
    let mut hk = q.clone();
    for it in 1..=MAX_DOUBLING {
        let w = &eye + &gk * &hk;
        let w_ak = solve(&w, &ak)?;
        let w_gk = solve(&w, &gk)?;
        let a_next = &ak * &w_ak;
        let g_next = &gk + &ak * w_gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w_ak;
        let delta = (&h_next - &hk).norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta <= 1e-15 * hk.norm().max(1.0) {
            let p = (&hk + hk.transpose()) * 0.5;
            let k = dlqr_gain(a, b, r, &p)?;
            return Ok(RiccatiSolution { p, k, iterations: it });
        }
    }
    Err(SimError::Fit("discrete Riccati iteration did not converge".into()))
}

pub fn dlqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    solve(&(r + &bt_p * b), &(bt_p * a))
}

/// Residual of the discrete ARE at `p`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let at_p = a.transpose() * p;
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let corr = &at_p * b * solve(&s, &(bt_p * a)).expect("R + B'PB invertible");
    at_p * a - p - corr + q
}

/// Solve `A' X + X A + M = 0` through the Kronecker form.
pub fn solve_lyapunov(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let big = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-m).as_slice());
    let x = solve(&big, &rhs)?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Continuous ARE `A'P + PA - P B R^{-1} B' P + Q = 0` by Newton–Kleinman,
/// starting from zero feedback (requires Hurwitz `A`).
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<RiccatiSolution> {
    let r_inv_bt = solve(r, &b.transpose())?;
    let mut k = DMatrix::zeros(b.ncols(), a.nrows());
    let mut p_prev: Option<DMatrix<f64>> = None;
    for it in 1..=MAX_NEWTON {
        let ak = a - b * &k;
        let p = solve_lyapunov(&ak, &(q + k.transpose() * r * &k))?;
        k = &r_inv_bt * &p;
        if let Some(prev) = &p_prev {
            if (&p - prev).norm() <= 1e-14 * p.norm().max(1.0) {
                return Ok(RiccatiSolution { p, k, iterations: it });
            }
        }
        p_prev = Some(p);
    }
    Err(SimError::Fit("Newton–Kleinman iteration did not converge".into()))
}

pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let pb = p * b;
    a.transpose() * p + p * a - &pb * solve(r, &pb.transpose()).expect("R invertible") + q
}
