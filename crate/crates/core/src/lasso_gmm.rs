//! Penalized GMM estimation by reduction to an ordinary Lasso.
//!
//! With a diagonal weight `W = diag(w_1..w_q)` the GMM quadratic form
//!
//! ```text
//! (Y − Xβ)ᵀ Z (W/q) Zᵀ (Y − Xβ) / n²
//! ```
//!
//! factors as `‖r − Aβ‖²` with `A = W^{1/2} ZᵀX / (n√q)` and
//! `r = W^{1/2} ZᵀY / (n√q)`. Both the first step (identity weight) and the
//! second step (inverse instrument variances) then minimise
//! `‖r − Aβ‖² + 2λ‖β‖₁` by cyclic coordinate descent. The stationarity
//! system of that objective is
//!
//! ```text
//! −Aᵀ(r − Aβ) + λκ = 0,   ‖κ‖∞ ≤ 1,   κ_j = sign(β_j) for β_j ≠ 0,
//! ```
//!
//! and `Aᵀ(r − Aβ) = (XᵀZ/n)(W/q)(Zᵀ(Y − Xβ)/n)`, so the KKT residual is
//! measured on the same scale as the GMM first-order conditions.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GmmError, Result};
use crate::inference::WeightMatrix;
use crate::numerics::{dot, Matrix};

/// Coefficient change per sweep below which the solver checks KKT.
pub const SWEEP_TOL: f64 = 1e-8;
/// Maximum KKT violation accepted for a converged fit.
pub const KKT_TOL: f64 = 1e-6;
pub const MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    Identity,
    Diagonal,
}

/// The Lasso form `(A, r)` of a weighted GMM problem, plus its Gram cache.
#[derive(Debug, Clone)]
pub struct GmmDesign {
    a: Matrix,
    r: Vec<f64>,
    gram: Matrix,
    atr: Vec<f64>,
    n: usize,
    weight_kind: WeightKind,
}

impl GmmDesign {
    /// Builds a design directly from `A` and `r`.
    pub fn from_parts(a: Matrix, r: Vec<f64>, n: usize, weight_kind: WeightKind) -> Result<Self> {
        if a.rows() != r.len() {
            return Err(GmmError::DimensionMismatch(format!(
                "A has {} rows but r has {} entries",
                a.rows(),
                r.len()
            )));
        }
        let gram = a.t_matmul(&a);
        let atr = a.t_matvec(&r);
        Ok(Self {
            a,
            r,
            gram,
            atr,
            n,
            weight_kind,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// `AᵀA`.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.a.cols()
    }

    pub fn weight_kind(&self) -> WeightKind {
        self.weight_kind
    }

    /// `‖r − Aβ‖²`.
    pub fn loss(&self, beta: &[f64]) -> f64 {
        let fitted = self.a.matvec(beta);
        self.r
            .iter()
            .zip(fitted)
            .map(|(r, f)| (r - f) * (r - f))
            .sum()
    }

    pub fn objective(&self, beta: &[f64], lambda: f64) -> f64 {
        self.loss(beta) + 2.0 * lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Gradient of half the loss, `−Aᵀ(r − Aβ)`.
    pub fn half_gradient(&self, beta: &[f64]) -> Vec<f64> {
        let g_beta = self.gram.matvec(beta);
        g_beta.iter().zip(&self.atr).map(|(gb, c)| gb - c).collect()
    }

    /// Largest KKT violation of `beta` at penalty `lambda`.
    pub fn kkt_gap(&self, beta: &[f64], lambda: f64) -> f64 {
        kkt_violation(&self.half_gradient(beta), beta, lambda)
    }

    /// `‖Aᵀr‖∞`, the smallest penalty with an all-zero solution.
    pub fn lambda_max(&self) -> f64 {
        self.atr.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Design with `A` and `r` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> GmmDesign {
        let r: Vec<f64> = self.r.iter().map(|v| v * c).collect();
        GmmDesign::from_parts(self.a.scale(c), r, self.n, self.weight_kind)
            .expect("scaling preserves dimensions")
    }
}

/// KKT violation given the half-gradient `g = −Aᵀ(r − Aβ)`.
pub fn kkt_violation(half_gradient: &[f64], beta: &[f64], lambda: f64) -> f64 {
    half_gradient
        .iter()
        .zip(beta)
        .map(|(&g, &b)| {
            if b == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g + lambda * b.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn build_design(data: &Dataset, weight: Option<&WeightMatrix>) -> Result<GmmDesign> {
    let (n, q) = (data.n(), data.q());
    let root_w: Vec<f64> = match weight {
        None => vec![1.0; q],
        Some(w) => {
            if w.len() != q {
                return Err(GmmError::DimensionMismatch(format!(
                    "weight matrix has {} entries for {} instruments",
                    w.len(),
                    q
                )));
            }
            if let Some((index, &value)) = w
                .sigma_sq()
                .iter()
                .enumerate()
                .find(|(_, &s)| s <= crate::inference::VARIANCE_FLOOR)
            {
                return Err(GmmError::DegenerateWeight { index, value });
            }
            w.sigma_sq().iter().map(|s| 1.0 / s.sqrt()).collect()
        }
    };
    let norm = n as f64 * (q as f64).sqrt();
    let row_scale: Vec<f64> = root_w.iter().map(|w| w / norm).collect();
    let a = data.z.t_matmul(&data.x).scale_rows(&row_scale);
    let r: Vec<f64> = data
        .z
        .t_matvec(&data.y)
        .iter()
        .zip(&row_scale)
        .map(|(v, s)| v * s)
        .collect();
    let kind = if weight.is_some() {
        WeightKind::Diagonal
    } else {
        WeightKind::Identity
    };
    GmmDesign::from_parts(a, r, n, kind)
}

/// Output of the coordinate-descent solver on a `(A, r)` design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSolution {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub kkt_gap: f64,
    pub active_set: Vec<usize>,
    pub sweeps: usize,
}

/// A penalized GMM fit on data, carrying the structural residuals `Y − Xβ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub residuals: Vec<f64>,
    pub kkt_gap: f64,
    pub active_set: Vec<usize>,
}

impl LassoFit {
    pub fn from_solution(sol: LassoSolution, data: &Dataset) -> Self {
        let residuals = data.residuals(&sol.beta);
        Self {
            beta: sol.beta,
            lambda: sol.lambda,
            residuals,
            kkt_gap: sol.kkt_gap,
            active_set: sol.active_set,
        }
    }
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

pub fn lasso_solve(design: &GmmDesign, lambda: f64) -> Result<LassoSolution> {
    lasso_solve_from(design, lambda, None)
}

/// Cyclic coordinate descent in covariance form, optionally warm-started.
pub fn lasso_solve_from(
    design: &GmmDesign,
    lambda: f64,
    init: Option<&[f64]>,
) -> Result<LassoSolution> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(GmmError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let p = design.p();
    let gram = &design.gram;
    let mut beta = match init {
        Some(b) if b.len() == p => b.to_vec(),
        Some(b) => {
            return Err(GmmError::DimensionMismatch(format!(
                "warm start of length {} for {} coefficients",
                b.len(),
                p
            )))
        }
        None => vec![0.0; p],
    };
    // Zero columns of A carry no information; their coefficient stays at zero.
    for j in 0..p {
        if gram[(j, j)] <= 0.0 {
            beta[j] = 0.0;
        }
    }
    // h = Aᵀ(r − Aβ)
    let mut h: Vec<f64> = design
        .atr
        .iter()
        .zip(gram.matvec(&beta))
        .map(|(c, gb)| c - gb)
        .collect();
    #[cfg(debug_assertions)]
    let mut last_obj = design.objective(&beta, lambda);

    let mut kkt_gap = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        let mut max_change = 0.0_f64;
        for j in 0..p {
            let norm_j = gram[(j, j)];
            if norm_j <= 0.0 {
                continue;
            }
            let old = beta[j];
            let new = soft_threshold(h[j] + norm_j * old, lambda) / norm_j;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                let col = gram.row(j);
                for (hk, gk) in h.iter_mut().zip(col) {
                    *hk -= delta * gk;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        #[cfg(debug_assertions)]
        {
            let obj = design.objective(&beta, lambda);
            debug_assert!(
                obj <= last_obj + 1e-10 * (1.0 + last_obj.abs()),
                "objective increased from {last_obj} to {obj} in sweep {sweep}"
            );
            last_obj = obj;
        }
        if max_change <= SWEEP_TOL {
            // refresh h to shed accumulated rounding before certifying
            let gb = gram.matvec(&beta);
            for ((hk, c), g) in h.iter_mut().zip(&design.atr).zip(gb) {
                *hk = c - g;
            }
            let neg: Vec<f64> = h.iter().map(|v| -v).collect();
            kkt_gap = kkt_violation(&neg, &beta, lambda);
            if kkt_gap <= KKT_TOL {
                let active_set = (0..p).filter(|&j| beta[j] != 0.0).collect();
                return Ok(LassoSolution {
                    beta,
                    lambda,
                    kkt_gap,
                    active_set,
                    sweeps: sweep,
                });
            }
        }
    }
    Err(GmmError::MaxIterationsExceeded {
        sweeps: MAX_SWEEPS,
        kkt_gap,
    })
}

/// Fits the penalized GMM problem on `data` and attaches residuals.
pub fn fit_lasso(data: &Dataset, weight: Option<&WeightMatrix>, lambda: f64) -> Result<LassoFit> {
    let design = build_design(data, weight)?;
    let sol = lasso_solve(&design, lambda)?;
    Ok(LassoFit::from_solution(sol, data))
}

/// `count` log-spaced values from `‖Aᵀr‖∞` down to `‖Aᵀr‖∞ · 10⁻³`.
pub fn default_lambda_grid(design: &GmmDesign, count: usize) -> Vec<f64> {
    let count = count.max(2);
    let lmax = design.lambda_max();
    // An all-zero moment vector still needs a positive grid.
    let lmax = if lmax > 0.0 {
        lmax
    } else {
        f64::MIN_POSITIVE.sqrt()
    };
    let log_max = lmax.ln();
    let log_min = (lmax * 1e-3).ln();
    (0..count)
        .map(|k| {
            if k == 0 {
                lmax
            } else if k == count - 1 {
                lmax * 1e-3
            } else {
                let t = k as f64 / (count - 1) as f64;
                (log_max + t * (log_min - log_max)).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// Log-spaced grid built from the full-sample design.
    Auto {
        count: usize,
    },
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub grid: LambdaGrid,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            grid: LambdaGrid::Auto { count: 50 },
        }
    }
}

/// Consecutive folds; the first `n mod k` folds hold one extra index.
pub fn fold_ranges(n: usize, k: usize) -> Vec<Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub lambda: f64,
    /// `(λ, criterion)` in descending λ order.
    pub path: Vec<(f64, f64)>,
    /// Largest KKT gap over every fold fit.
    pub max_kkt_gap: f64,
    pub fits: usize,
}

/// Held-out GMM criterion `mᵀ (W/q) m` with `m = Σ_{i∈fold} Z_i (Y_i − X_iᵀβ)`.
fn holdout_criterion(data: &Dataset, rows: Range<usize>, beta: &[f64], weights: &[f64]) -> f64 {
    let q = data.q();
    let mut m = vec![0.0; q];
    for i in rows {
        let u = data.y[i] - dot(data.x.row(i), beta);
        for (ml, zl) in m.iter_mut().zip(data.z.row(i)) {
            *ml += zl * u;
        }
    }
    m.iter()
        .zip(weights)
        .map(|(ml, w)| ml * ml * w)
        .sum::<f64>()
        / q as f64
}

/// K-fold GMM cross-validation over a λ grid.
///
/// Each fold is trained on the complementary rows with the same weight
/// matrix, walking the grid from the largest λ down with warm starts, and
/// scored by the unnormalised held-out quadratic form. Exact ties go to the
/// larger λ.
pub fn cross_validate(
    data: &Dataset,
    weight: Option<&WeightMatrix>,
    config: &CvConfig,
) -> Result<CvOutcome> {
    let n = data.n();
    let k = config.folds;
    if k < 2 || n < k {
        return Err(GmmError::DimensionMismatch(format!(
            "cross-validation needs n >= K with K >= 2 (n = {n}, K = {k})"
        )));
    }
    let mut grid = match &config.grid {
        LambdaGrid::Auto { count } => default_lambda_grid(&build_design(data, weight)?, *count),
        LambdaGrid::Explicit(g) => g.clone(),
    };
    if grid.is_empty() {
        return Err(GmmError::InvalidArgument("empty lambda grid".into()));
    }
    if grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(GmmError::InvalidArgument(
            "lambda grid values must be positive".into(),
        ));
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let weights: Vec<f64> = match weight {
        Some(w) => w.weights(),
        None => vec![1.0; data.q()],
    };
    let folds = fold_ranges(n, k);
    let per_fold: Vec<(Vec<f64>, f64)> = folds
        .par_iter()
        .map(|held| -> Result<(Vec<f64>, f64)> {
            let train: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
            let design = build_design(&data.subset(&train), weight)?;
            let mut warm: Option<Vec<f64>> = None;
            let mut crit = Vec::with_capacity(grid.len());
            let mut worst = 0.0_f64;
            for &lambda in &grid {
                let sol = lasso_solve_from(&design, lambda, warm.as_deref())?;
                worst = worst.max(sol.kkt_gap);
                crit.push(holdout_criterion(data, held.clone(), &sol.beta, &weights));
                warm = Some(sol.beta);
            }
            Ok((crit, worst))
        })
        .collect::<Result<_>>()?;

    let mut total = vec![0.0; grid.len()];
    let mut max_kkt_gap = 0.0_f64;
    for (crit, worst) in &per_fold {
        for (t, c) in total.iter_mut().zip(crit) {
            *t += c;
        }
        max_kkt_gap = max_kkt_gap.max(*worst);
    }
    let mut best = 0;
    for (idx, c) in total.iter().enumerate() {
        if *c < total[best] {
            best = idx;
        }
    }
    Ok(CvOutcome {
        lambda: grid[best],
        path: grid.iter().copied().zip(total).collect(),
        max_kkt_gap,
        fits: grid.len() * k,
    })
}
