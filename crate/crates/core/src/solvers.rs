//! Closed-form single-layer updates for the preservation-memorization
//! objective.
//!
//! All three methods preserve `W0 K0` (through `C0 = K0 K0^T`) while writing
//! new key/value pairs:
//!
//! * ROME: one pair, hard constraint `W k_e = v_e`.
//! * MEMIT: a batch, least-squares memorization weighted against `lambda * C0`.
//! * EMMET: a batch, hard constraints `W K_E = V_E`, optionally with the
//!   `D + alpha I` stabilizer on `D = K_E^T C0^-1 K_E`.
//!
//! No inverse is ever formed; every `C0^-1` product is a Cholesky solve.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for every rank decision.
pub const RANK_TOL: f64 = 1e-10;
/// Condition numbers are reported as infinite below this smallest singular value.
pub const SINGULAR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rome,
    Memit,
    Emmet,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rome, Method::Memit, Method::Emmet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rome => "rome",
            Method::Memit => "memit",
            Method::Emmet => "emmet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rome" => Ok(Method::Rome),
            "memit" => Ok(Method::Memit),
            "emmet" => Ok(Method::Emmet),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Preservation weight for MEMIT.
    pub lambda: f64,
    /// Diagonal stabilizer added to EMMET's `D`.
    pub alpha: f64,
    pub condition_warn_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Emmet,
            lambda: 1.0,
            alpha: 0.1,
            condition_warn_threshold: 1e8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Memit && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("MEMIT needs lambda > 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// Numerical rank of the key matrix it was built from.
    pub rank: usize,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub delta: DMatrix<f64>,
    pub new_weights: DMatrix<f64>,
    /// `||W_hat K_E - V_E||_F`
    pub memorization_residual: f64,
    /// `||(W_hat - W0) K0||_F`, evaluated as `sqrt(tr(Delta C0 Delta^T))`.
    pub preservation_residual: f64,
    pub condition_c0: f64,
    /// Condition number of `D = K_E^T C0^-1 K_E` (EMMET only).
    pub condition_d: Option<f64>,
    /// Condition number of `D + alpha I` (EMMET only).
    pub condition_d_regularized: Option<f64>,
}

impl UpdateResult {
    /// Human-readable warnings for condition numbers above `threshold`.
    pub fn warnings(&self, threshold: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.condition_c0 > threshold {
            out.push(format!("C0 ill-conditioned (cond {:.3e})", self.condition_c0));
        }
        if let Some(c) = self.condition_d_regularized.filter(|&c| c > threshold) {
            out.push(format!("D ill-conditioned (cond {c:.3e})"));
        }
        out
    }

    pub fn is_ill_conditioned(&self, threshold: f64) -> bool {
        !self.warnings(threshold).is_empty()
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Checks the shapes of a `(W0, C0, K_E, V_E)` problem.
fn check_problem(w0: &DMatrix<f64>, c0: &DMatrix<f64>, k_e: &DMatrix<f64>, v_e: &DMatrix<f64>) -> Result<()> {
    let (d_v, d_k) = w0.shape();
    if c0.shape() != (d_k, d_k) {
        return Err(Error::dim("C0", format!("{d_k}x{d_k}"), shape(c0)));
    }
    if k_e.nrows() != d_k {
        return Err(Error::dim("K_E rows", d_k, k_e.nrows()));
    }
    if v_e.shape() != (d_v, k_e.ncols()) {
        return Err(Error::dim("V_E", format!("{d_v}x{}", k_e.ncols()), shape(v_e)));
    }
    if k_e.ncols() == 0 {
        return Err(Error::Precondition("at least one edit is required".into()));
    }
    check_finite(w0, "W0")?;
    check_finite(c0, "C0")?;
    check_finite(k_e, "K_E")?;
    check_finite(v_e, "V_E")
}

/// Cholesky factorization that also rejects numerically singular matrices.
fn spd_factor(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let chol =
        Cholesky::new(m.clone()).ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if !(lo > 0.0) || (lo * lo) <= f64::EPSILON * m.nrows() as f64 * hi * hi {
        return Err(Error::Factorization(format!(
            "{what} is numerically singular (pivot ratio {:.3e})",
            (lo / hi).powi(2)
        )));
    }
    Ok(chol)
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

/// Number of singular values above `RANK_TOL * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    let max = s.max();
    if !(max > 0.0) {
        return 0;
    }
    s.iter().filter(|&&x| x > RANK_TOL * max).count()
}

/// Columns that are (numerically) combinations of earlier columns, found by
/// greedily growing an independent set left to right.
pub fn dependent_columns(k: &DMatrix<f64>) -> Vec<usize> {
    let s_max = singular_values(k).max();
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..k.ncols() {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = k.select_columns(trial.iter());
        let s = singular_values(&sub);
        if s_max > 0.0 && s.min() > RANK_TOL * s_max {
            kept.push(j);
        } else {
            dependent.push(j);
        }
    }
    dependent
}

/// `sigma_max / sigma_min`, or `+inf` when `sigma_min` underflows.
pub fn condition_number(m: &DMatrix<f64>, symmetric: bool) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dim("condition number", "square matrix", shape(m)));
    }
    if m.is_empty() {
        return Ok(1.0);
    }
    check_finite(m, "condition number input")?;
    let s: DVector<f64> = if symmetric {
        m.clone().symmetric_eigenvalues().map(f64::abs)
    } else {
        singular_values(m)
    };
    let (lo, hi) = (s.min(), s.max());
    if lo < SINGULAR_FLOOR {
        return Ok(f64::INFINITY);
    }
    Ok(hi / lo)
}

/// `C0 = K0 K0^T`, flagging rank deficiency of `K0`.
pub fn accumulate_covariance(k0: &DMatrix<f64>) -> Result<Covariance> {
    if k0.ncols() == 0 {
        return Err(Error::Precondition("K0 needs at least one key".into()));
    }
    check_finite(k0, "K0")?;
    let matrix = k0 * k0.transpose();
    let rank = numerical_rank(k0);
    Ok(Covariance {
        matrix,
        rank,
        rank_deficient: rank < k0.nrows(),
    })
}

pub(crate) fn finish(
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    delta: DMatrix<f64>,
    condition_d: Option<(f64, f64)>,
) -> Result<UpdateResult> {
    let new_weights = w0 + &delta;
    let memorization_residual = (&new_weights * k_e - v_e).norm();
    let preservation_residual = (&delta * c0).component_mul(&delta).sum().max(0.0).sqrt();
    let condition_c0 = condition_number(c0, true)?;
    Ok(UpdateResult {
        delta,
        new_weights,
        memorization_residual,
        preservation_residual,
        condition_c0,
        condition_d: condition_d.map(|c| c.0),
        condition_d_regularized: condition_d.map(|c| c.1),
    })
}

/// ROME delta for a precomputed residual `r = v_e - W0 k_e`.
pub(crate) fn rome_delta(c0: &DMatrix<f64>, k_e: &DVector<f64>, residual: &DVector<f64>) -> Result<DMatrix<f64>> {
    if k_e.iter().all(|&x| x == 0.0) {
        return Err(Error::Precondition("edit key is zero".into()));
    }
    let chol = spd_factor(c0, "C0")?;
    let u = chol.solve(k_e);
    let denominator = k_e.dot(&u);
    if !(denominator >= 1e-14) {
        return Err(Error::DegenerateKey { denominator });
    }
    Ok(residual * (u.transpose() / denominator))
}

pub fn rome_update(
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DVector<f64>,
    v_e: &DVector<f64>,
) -> Result<UpdateResult> {
    let k = DMatrix::from_column_slice(k_e.len(), 1, k_e.as_slice());
    let v = DMatrix::from_column_slice(v_e.len(), 1, v_e.as_slice());
    check_problem(w0, c0, &k, &v)?;
    let residual = v_e - w0 * k_e;
    let delta = rome_delta(c0, k_e, &residual)?;
    finish(w0, c0, &k, &v, delta, None)
}

/// MEMIT delta for a precomputed residual `R` (d_v x E).
pub(crate) fn memit_delta(
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Precondition(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let system = c0 * lambda + k_e * k_e.transpose();
    let chol = spd_factor(&system, "lambda*C0 + K_E K_E^T").map_err(|e| {
        Error::Factorization(format!(
            "{e}; lambda = {lambda}, rank(C0) = {}, rank(K_E) = {} of {} edits",
            numerical_rank(c0),
            numerical_rank(k_e),
            k_e.ncols()
        ))
    })?;
    // system is symmetric: (R K^T S^-1)^T = S^-1 K R^T
    Ok(chol.solve(&(k_e * residual.transpose())).transpose())
}

pub fn memit_update(
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    lambda: f64,
) -> Result<UpdateResult> {
    check_problem(w0, c0, k_e, v_e)?;
    let residual = v_e - w0 * k_e;
    let delta = memit_delta(c0, k_e, &residual, lambda)?;
    finish(w0, c0, k_e, v_e, delta, None)
}

/// Pieces shared by EMMET and the multiplier computation.
struct EqualitySystem {
    /// `C0^-1 K_E`
    c0_inv_keys: DMatrix<f64>,
    /// `K_E^T C0^-1 K_E`
    d: DMatrix<f64>,
}

/// With `exact` the hard constraints must be satisfiable, so the batch has to
/// fit in `d_k` with independent keys. A positive `alpha` lifts both checks.
fn equality_system(c0: &DMatrix<f64>, k_e: &DMatrix<f64>, exact: bool) -> Result<EqualitySystem> {
    let (d_k, edits) = k_e.shape();
    if exact && edits > d_k {
        return Err(Error::InfeasibleBatch { edits, key_dim: d_k });
    }
    if exact {
        let rank = numerical_rank(k_e);
        if rank < edits {
            return Err(Error::RankDeficientKeys {
                dependent: dependent_columns(k_e),
                rank,
                edits,
            });
        }
    }
    let chol = spd_factor(c0, "C0")?;
    // D = Z^T Z with Z = L^-1 K_E keeps D exactly symmetric
    let z = chol
        .l_dirty()
        .solve_lower_triangular(k_e)
        .ok_or_else(|| Error::Factorization("triangular solve with C0 factor".into()))?;
    let d = z.transpose() * &z;
    let c0_inv_keys = chol.solve(k_e);
    Ok(EqualitySystem { c0_inv_keys, d })
}

/// EMMET delta for a precomputed residual; also returns `(cond D, cond D~)`.
pub(crate) fn emmet_delta(
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, f64, f64)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Precondition(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let sys = equality_system(c0, k_e, alpha == 0.0)?;
    let cond_d = condition_number(&sys.d, true)?;
    let mut d_reg = sys.d;
    for i in 0..d_reg.nrows() {
        d_reg[(i, i)] += alpha;
    }
    let cond_reg = if alpha == 0.0 {
        cond_d
    } else {
        condition_number(&d_reg, true)?
    };
    let chol = spd_factor(&d_reg, "D + alpha I")?;
    // Delta = R D~^-1 (C0^-1 K_E)^T, and D~ is symmetric
    let lambda_t = chol.solve(&residual.transpose());
    Ok(((&sys.c0_inv_keys * lambda_t).transpose(), cond_d, cond_reg))
}

pub fn emmet_update(
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    alpha: f64,
) -> Result<UpdateResult> {
    check_problem(w0, c0, k_e, v_e)?;
    let residual = v_e - w0 * k_e;
    let (delta, cond_d, cond_reg) = emmet_delta(c0, k_e, &residual, alpha)?;
    finish(w0, c0, k_e, v_e, delta, Some((cond_d, cond_reg)))
}

/// Lagrange multipliers `Lambda = (V_E - W0 K_E) D^-1` of the unregularized
/// equality-constrained problem, so that `W_hat = W0 + Lambda K_E^T C0^-1`.
pub fn lagrange_multipliers(
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_problem(w0, c0, k_e, v_e)?;
    let sys = equality_system(c0, k_e, true)?;
    let chol = spd_factor(&sys.d, "D")?;
    let residual = v_e - w0 * k_e;
    Ok(chol.solve(&residual.transpose()).transpose())
}

/// `lambda * ||W K0 - W0 K0||^2 + ||W K_E - V_E||^2` evaluated through `C0`.
pub fn memit_objective(
    w: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let delta = w - w0;
    lambda * (&delta * c0).component_mul(&delta).sum() + (w * k_e - v_e).norm_squared()
}

/// `||lambda * Delta C0 + (W_hat K_E - V_E) K_E^T||_F`, zero at the MEMIT optimum.
pub fn memit_stationarity(
    result: &UpdateResult,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    (&result.delta * c0 * lambda + (&result.new_weights * k_e - v_e) * k_e.transpose()).norm()
}

/// Dispatches on `config.method`. ROME accepts exactly one edit.
pub fn solve(
    config: &SolverConfig,
    w0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    k_e: &DMatrix<f64>,
    v_e: &DMatrix<f64>,
) -> Result<UpdateResult> {
    config.validate()?;
    match config.method {
        Method::Rome => {
            if k_e.ncols() != 1 {
                return Err(Error::Precondition(format!(
                    "ROME edits one fact at a time, got {}",
                    k_e.ncols()
                )));
            }
            rome_update(w0, c0, &k_e.column(0).into_owned(), &v_e.column(0).into_owned())
        }
        Method::Memit => memit_update(w0, c0, k_e, v_e, config.lambda),
        Method::Emmet => emmet_update(w0, c0, k_e, v_e, config.alpha),
    }
}
