//! Row-wise CLIME approximate inverse of the GMM curvature matrix.
//!
//! Row `j` of `Γ̂` solves `min ‖a‖₁ s.t. ‖aΣ̂ − e_jᵀ‖∞ ≤ μ_j`, with
//! `μ_j = max(1.2 · inf_a ‖aΣ̂ − e_jᵀ‖∞, 1e-8)`. Both the infimum and the row
//! program are linear programs over the split `a = a⁺ − a⁻`. The matrix is
//! rescaled to unit max-norm before it reaches the simplex; this leaves the
//! infimum unchanged and rescales the minimiser by the same factor.

use rayon::prelude::*;

use super::simplex::{lp_solve, LpProblem};
use crate::data::Dataset;
use crate::error::{GmmError, Result};
use crate::inference::WeightMatrix;
use crate::lasso_gmm::build_design;
use crate::numerics::Matrix;

pub const MU_FACTOR: f64 = 1.2;
pub const MU_FLOOR: f64 = 1e-8;

/// The `p×p` matrix `Σ̂ = (XᵀZ/n)(W/q)(ZᵀX/n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaHat(Matrix);

impl SigmaHat {
    /// Wraps a symmetric matrix; asymmetric input is rejected.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() || m.rows() == 0 {
            return Err(GmmError::DimensionMismatch(format!(
                "sigma must be square and nonempty, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_symmetric(1e-10) {
            return Err(GmmError::InvalidArgument("sigma is not symmetric".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    fn normalized(&self) -> (Matrix, f64) {
        let s = self
            .0
            .as_slice()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if s > 0.0 {
            (self.0.scale(1.0 / s), s)
        } else {
            (self.0.clone(), 1.0)
        }
    }
}

/// `Σ̂ = AᵀA` with `A` the weighted GMM design.
pub fn sigma_hat(data: &Dataset, weight: Option<&WeightMatrix>) -> Result<SigmaHat> {
    let design = build_design(data, weight)?;
    Ok(SigmaHat(design.gram().clone()))
}

/// `‖aΣ̂ − e_jᵀ‖∞`.
pub fn row_residual(sigma: &Matrix, j: usize, a: &[f64]) -> f64 {
    let v = sigma.t_matvec(a);
    v.iter()
        .enumerate()
        .map(|(k, vk)| (vk - if k == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

fn check_index(sigma: &SigmaHat, j: usize) -> Result<()> {
    if j >= sigma.dim() {
        Err(GmmError::InvalidArgument(format!(
            "row {j} out of range for a {}x{} matrix",
            sigma.dim(),
            sigma.dim()
        )))
    } else {
        Ok(())
    }
}

/// `inf_a ‖aΣ̂ − e_jᵀ‖∞`, solved as an LP in `(a⁺, a⁻, t)`.
pub fn clime_infimum(sigma: &SigmaHat, j: usize) -> Result<f64> {
    check_index(sigma, j)?;
    let p = sigma.dim();
    let (s, _) = sigma.normalized();
    let vars = 2 * p + 1;
    let mut g = Matrix::zeros(2 * p, vars);
    let mut h = vec![0.0; 2 * p];
    for k in 0..p {
        let e = if k == j { 1.0 } else { 0.0 };
        for i in 0..p {
            let v = s[(i, k)];
            g[(k, i)] = v;
            g[(k, p + i)] = -v;
            g[(p + k, i)] = -v;
            g[(p + k, p + i)] = v;
        }
        g[(k, 2 * p)] = -1.0;
        g[(p + k, 2 * p)] = -1.0;
        h[k] = e;
        h[p + k] = -e;
    }
    let mut c = vec![0.0; vars];
    c[2 * p] = 1.0;
    let sol = lp_solve(&LpProblem::new(c, g, h)?)?;
    Ok(sol.objective.max(0.0))
}

/// `μ_j = max(1.2 · inf_a ‖aΣ̂ − e_jᵀ‖∞, 1e-8)`.
pub fn clime_mu(sigma: &SigmaHat, j: usize) -> Result<f64> {
    Ok((MU_FACTOR * clime_infimum(sigma, j)?).max(MU_FLOOR))
}

/// Solves the CLIME program for row `j` at tolerance `mu`.
pub fn clime_row(sigma: &SigmaHat, j: usize, mu: f64) -> Result<Vec<f64>> {
    check_index(sigma, j)?;
    if !(mu >= 0.0) {
        return Err(GmmError::InvalidArgument(format!(
            "mu must be >= 0, got {mu}"
        )));
    }
    let p = sigma.dim();
    let (s, scale) = sigma.normalized();
    let mut g = Matrix::zeros(2 * p, 2 * p);
    let mut h = vec![0.0; 2 * p];
    for k in 0..p {
        let e = if k == j { 1.0 } else { 0.0 };
        for i in 0..p {
            let v = s[(i, k)];
            g[(k, i)] = v;
            g[(k, p + i)] = -v;
            g[(p + k, i)] = -v;
            g[(p + k, p + i)] = v;
        }
        h[k] = mu + e;
        h[p + k] = mu - e;
    }
    let sol = lp_solve(&LpProblem::new(vec![1.0; 2 * p], g, h)?)?;
    Ok((0..p).map(|i| (sol.x[i] - sol.x[p + i]) / scale).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimeResult {
    pub gamma_hat: Matrix,
    pub mu: Vec<f64>,
    /// `‖Γ̂_jΣ̂ − e_jᵀ‖∞` per row.
    pub feasibility_slack: Vec<f64>,
}

impl ClimeResult {
    /// Wraps an externally supplied approximate inverse, e.g. an exact one.
    pub fn from_gamma(gamma_hat: Matrix, sigma: &SigmaHat) -> Self {
        let p = gamma_hat.rows();
        let feasibility_slack: Vec<f64> = (0..p)
            .map(|j| row_residual(sigma.matrix(), j, gamma_hat.row(j)))
            .collect();
        Self {
            gamma_hat,
            mu: feasibility_slack.clone(),
            feasibility_slack,
        }
    }

    /// Largest `slack_j − μ_j`; non-positive (up to 1e-8) for a valid result.
    pub fn max_excess(&self) -> f64 {
        self.feasibility_slack
            .iter()
            .zip(&self.mu)
            .map(|(s, m)| s - m)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs [`clime_mu`] then [`clime_row`] for every row; rows are independent.
pub fn clime_full(sigma: &SigmaHat) -> Result<ClimeResult> {
    let p = sigma.dim();
    let rows: Vec<(Vec<f64>, f64)> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mu = clime_mu(sigma, j)?;
            Ok((clime_row(sigma, j, mu)?, mu))
        })
        .collect::<Result<_>>()?;
    let mut gamma_hat = Matrix::zeros(p, p);
    let mut mu = Vec::with_capacity(p);
    let mut feasibility_slack = Vec::with_capacity(p);
    for (j, (row, m)) in rows.into_iter().enumerate() {
        feasibility_slack.push(row_residual(sigma.matrix(), j, &row));
        gamma_hat.row_mut(j).copy_from_slice(&row);
        mu.push(m);
    }
    Ok(ClimeResult {
        gamma_hat,
        mu,
        feasibility_slack,
    })
}
