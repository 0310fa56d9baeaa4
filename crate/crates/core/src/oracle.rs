//! Reference solvers for verification.
//!
//! Nothing here calls into [`crate::solvers`]: the equality-constrained
//! problem is solved by assembling its KKT system and running a hand-written
//! Gaussian elimination, the MEMIT objective by plain gradient descent.
//! These are slow on purpose.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub weights: DMatrix<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Lagrange multipliers (d_v x E) for the equality-constrained solve.
    pub multipliers: Option<DMatrix<f64>>,
}

/// `K K^T` by explicit accumulation.
fn gram(k: &DMatrix<f64>) -> DMatrix<f64> {
    let d = k.nrows();
    let mut c = DMatrix::zeros(d, d);
    for col in 0..k.ncols() {
        for i in 0..d {
            let ki = k[(i, col)];
            for j in 0..d {
                c[(i, j)] += ki * k[(j, col)];
            }
        }
    }
    c
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: DMatrix<f64>, mut b: DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let (pivot_row, pivot_abs) =
            (col..n)
                .map(|r| (r, a[(r, col)].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= 1e-13 * scale {
            return Err(Error::SingularKkt { pivot: col, size: n });
        }
        if pivot_row != col {
            a.swap_rows(pivot_row, col);
            b.swap_rows(pivot_row, col);
        }
        let p = a[(col, col)];
        for r in col + 1..n {
            let factor = a[(r, col)] / p;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= factor * a[(col, c)];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = DVector::zeros(n);
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[(r, c)] * x[c];
        }
        x[r] = s / a[(r, r)];
    }
    Ok(x)
}

/// `||W K0 - W0 K0||_F^2` evaluated on the keys themselves.
pub fn preservation_objective(w: &DMatrix<f64>, w0: &DMatrix<f64>, k0: &DMatrix<f64>) -> f64 {
    ((w - w0) * k0).norm_squared()
}

/// Minimizes `||W K0 - W0 K0||^2` subject to `W K_E = V_E` through the KKT
/// conditions. The objective separates over rows of `W`, so each row solves
///
/// ```text
/// [ C0    K_E ] [ w  ]   [ C0 w0 ]
/// [ K_E^T  0  ] [ nu ] = [ v     ]
/// ```
///
/// and the multipliers are `lambda = -nu`.
pub fn kkt_solve(w0: &DMatrix<f64>, k0: &DMatrix<f64>, k_e: &DMatrix<f64>, v_e: &DMatrix<f64>) -> Result<OracleResult> {
    let (d_v, d_k) = w0.shape();
    let e = k_e.ncols();
    if k0.nrows() != d_k || k_e.nrows() != d_k || v_e.shape() != (d_v, e) {
        return Err(Error::dim(
            "kkt problem",
            format!("K0 {d_k}xN, K_E {d_k}xE, V_E {d_v}xE"),
            format!("K0 {:?}, K_E {:?}, V_E {:?}", k0.shape(), k_e.shape(), v_e.shape()),
        ));
    }
    let c0 = gram(k0);
    let n = d_k + e;
    let mut kkt = DMatrix::zeros(n, n);
    kkt.view_mut((0, 0), (d_k, d_k)).copy_from(&c0);
    kkt.view_mut((0, d_k), (d_k, e)).copy_from(k_e);
    kkt.view_mut((d_k, 0), (e, d_k)).copy_from(&k_e.transpose());

    let mut weights = DMatrix::zeros(d_v, d_k);
    let mut multipliers = DMatrix::zeros(d_v, e);
    for row in 0..d_v {
        let w0_row = w0.row(row).transpose();
        let mut rhs = DVector::zeros(n);
        rhs.rows_mut(0, d_k).copy_from(&(&c0 * &w0_row));
        rhs.rows_mut(d_k, e).copy_from(&v_e.row(row).transpose());
        let x = gauss_solve(kkt.clone(), rhs)?;
        weights.row_mut(row).copy_from(&x.rows(0, d_k).transpose());
        multipliers.row_mut(row).copy_from(&(-x.rows(d_k, e).transpose()));
    }
    Ok(OracleResult {
        objective_value: preservation_objective(&weights, w0, k0),
        weights,
        iterations: d_v,
        converged: true,
        multipliers: Some(multipliers),
    })
}

/// `lambda ||W K0 - W0 K0||^2 + ||W K_E - V_E||^2`
pub fn memit_objective(
    w: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    lambda * preservation_objective(w, w0, k0) + (w * k_e - v_e).norm_squared()
}

/// `2 lambda (W K0 - W0 K0) K0^T + 2 (W K_E - V_E) K_E^T`
pub fn memit_gradient(
    w: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    lambda: f64,
) -> DMatrix<f64> {
    ((w - w0) * k0) * k0.transpose() * (2.0 * lambda) + (w * k_e - v_e) * k_e.transpose() * 2.0
}

/// A safe descent step `1 / (2.02 mu)` with `mu` the power-iteration
/// estimate of the largest eigenvalue of `lambda K0 K0^T + K_E K_E^T`.
pub fn descent_step(k0: &DMatrix<f64>, k_e: &DMatrix<f64>, lambda: f64) -> f64 {
    let d = k0.nrows();
    let mut x = DVector::from_fn(d, |i, _| 1.0 + (i as f64) * 1e-3);
    let mut mu = 0.0;
    for _ in 0..500 {
        let y = (k0 * k0.tr_mul(&x)) * lambda + k_e * k_e.tr_mul(&x);
        let n = y.norm();
        if n == 0.0 {
            return 1.0;
        }
        mu = x.dot(&y) / x.norm_squared();
        x = y / n;
    }
    1.0 / (2.02 * mu)
}

/// Fixed-step gradient descent on the MEMIT objective from `W0`.
pub fn gd_minimize(
    w0: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    lambda: f64,
    steps: usize,
    step_size: f64,
) -> Result<OracleResult> {
    if steps == 0 {
        return Err(Error::Precondition("steps must be >= 1".into()));
    }
    if !(step_size > 0.0) {
        return Err(Error::Precondition(format!("step_size must be > 0, got {step_size}")));
    }
    let mut w = w0.clone();
    let mut f = memit_objective(&w, w0, k0, k_e, v_e, lambda);
    let g0 = memit_gradient(&w, w0, k0, k_e, v_e, lambda).norm();
    let mut increases = 0;
    let mut iterations = 0;
    let mut g_norm = g0;
    for step in 0..steps {
        let g = memit_gradient(&w, w0, k0, k_e, v_e, lambda);
        g_norm = g.norm();
        if g_norm <= 1e-14 * (1.0 + g0) {
            break;
        }
        w -= g * step_size;
        iterations = step + 1;
        let next = memit_objective(&w, w0, k0, k_e, v_e, lambda);
        if !next.is_finite() {
            return Err(Error::Divergence { step });
        }
        increases = if next > f { increases + 1 } else { 0 };
        if increases >= 10 {
            return Err(Error::Divergence { step });
        }
        f = next;
    }
    Ok(OracleResult {
        weights: w,
        objective_value: f,
        iterations,
        converged: g_norm <= 1e-8 * (1.0 + g0),
        multipliers: None,
    })
}

/// Central-difference gradient of `objective` at `at`.
pub fn finite_diff_gradient(
    objective: &dyn Fn(&DMatrix<f64>) -> f64,
    at: &DMatrix<f64>,
    eps: f64,
) -> Result<DMatrix<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("eps must be > 0, got {eps}")));
    }
    let mut grad = DMatrix::zeros(at.nrows(), at.ncols());
    let mut probe = at.clone();
    for j in 0..at.ncols() {
        for i in 0..at.nrows() {
            let x = at[(i, j)];
            probe[(i, j)] = x + eps;
            let fp = objective(&probe);
            probe[(i, j)] = x - eps;
            let fm = objective(&probe);
            probe[(i, j)] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("objective at entry ({i}, {j})")));
            }
            grad[(i, j)] = (fp - fm) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// `||a - b|| / ||b||`, or `||a||` when `b` vanishes.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let nb = b.norm();
    if nb == 0.0 {
        a.norm()
    } else {
        (a - b).norm() / nb
    }
}
