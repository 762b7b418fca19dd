//! Two-step estimation, desparsification and heteroskedasticity-robust
//! inference.
//!
//! The pipeline runs in three parts:
//!
//! 1. cross-validated first-step fit with identity weight, instrument
//!    variances `σ̂_l² = n⁻¹ Σ_i Z_il² û_i²` from its residuals, then a
//!    cross-validated second-step fit with `Ŵ_d = diag(1/σ̂_l²)`;
//! 2. the CLIME approximate inverse `Γ̂` of `Σ̂ = (XᵀZ/n)(Ŵ_d/q)(ZᵀX/n)`;
//! 3. the debiased estimate `b̂ = β̂ + Γ̂ (XᵀZ/n)(Ŵ_d/q) Zᵀ(Y − Xβ̂)/n` and
//!    the sandwich variance `Γ̂ V̂_d Γ̂ᵀ` with
//!    `V̂_d = (XᵀZ/n)(Ŵ_d/q) Σ̂_Zu (Ŵ_d/q)(ZᵀX/n)`, where `Σ̂_Zu` is built
//!    from the *first-step* residuals.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GmmError, Result};
use crate::lasso_gmm::{cross_validate, fit_lasso, kkt_violation, CvConfig, CvOutcome, LassoFit};
use crate::lp_clime::{clime_full, sigma_hat, ClimeResult, SigmaHat};
use crate::numerics::{dot, Matrix};
use crate::stats::two_sided_z;

/// Instrument variances at or below this value are rejected.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Diagonal weight matrix stored as instrument variances `σ̂_l²`;
/// the weights themselves are `1/σ̂_l²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    sigma_sq: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_variances(sigma_sq: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = sigma_sq
            .iter()
            .enumerate()
            .find(|(_, &s)| !(s > VARIANCE_FLOOR) || !s.is_finite())
        {
            return Err(GmmError::DegenerateWeight { index, value });
        }
        Ok(Self { sigma_sq })
    }

    pub fn sigma_sq(&self) -> &[f64] {
        &self.sigma_sq
    }

    pub fn weights(&self) -> Vec<f64> {
        self.sigma_sq.iter().map(|s| 1.0 / s).collect()
    }

    pub fn len(&self) -> usize {
        self.sigma_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_sq.is_empty()
    }
}

pub fn weight_matrix(z: &Matrix, residuals: &[f64]) -> Result<WeightMatrix> {
    if z.rows() != residuals.len() {
        return Err(GmmError::DimensionMismatch(format!(
            "Z has {} rows but there are {} residuals",
            z.rows(),
            residuals.len()
        )));
    }
    let n = z.rows() as f64;
    let mut sigma_sq = vec![0.0; z.cols()];
    for (i, u) in residuals.iter().enumerate() {
        let u2 = u * u;
        for (s, zl) in sigma_sq.iter_mut().zip(z.row(i)) {
            *s += zl * zl * u2;
        }
    }
    for s in sigma_sq.iter_mut() {
        *s /= n;
    }
    if let Some((index, &value)) = sigma_sq
        .iter()
        .enumerate()
        .find(|(_, &s)| s <= VARIANCE_FLOOR)
    {
        return Err(GmmError::DegenerateInstrumentVariance { index, value });
    }
    Ok(WeightMatrix { sigma_sq })
}

/// Stationarity residual of a penalized GMM fit, evaluated directly from the
/// data as `max_j` of the violation of
/// `−(XᵀZ/n)(W/q)(Zᵀ(Y − Xβ)/n) + λκ = 0`.
pub fn kkt_violation_raw(
    data: &Dataset,
    weight: Option<&WeightMatrix>,
    beta: &[f64],
    lambda: f64,
) -> f64 {
    let (n, q) = (data.n() as f64, data.q());
    let u = data.residuals(beta);
    let mut m = data.z.t_matvec(&u);
    let w = weight
        .map(WeightMatrix::weights)
        .unwrap_or_else(|| vec![1.0; q]);
    for (ml, wl) in m.iter_mut().zip(&w) {
        *ml *= wl / (q as f64 * n);
    }
    let grad: Vec<f64> = data
        .x
        .t_matmul(&data.z)
        .matvec(&m)
        .iter()
        .map(|v| -v / n)
        .collect();
    kkt_violation(&grad, beta, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepFit {
    pub first_cv: CvOutcome,
    pub first_fit: LassoFit,
    pub weight: WeightMatrix,
    pub second_cv: CvOutcome,
    pub second_fit: LassoFit,
}

impl TwoStepFit {
    /// Largest KKT violation over the two final fits and every CV fold fit.
    pub fn max_kkt_gap(&self) -> f64 {
        self.first_cv
            .max_kkt_gap
            .max(self.second_cv.max_kkt_gap)
            .max(self.first_fit.kkt_gap)
            .max(self.second_fit.kkt_gap)
    }

    pub fn fits(&self) -> usize {
        self.first_cv.fits + self.second_cv.fits + 2
    }
}

pub fn two_step_pipeline(data: &Dataset, cv: &CvConfig) -> Result<TwoStepFit> {
    let first_cv = cross_validate(data, None, cv)?;
    let first_fit = fit_lasso(data, None, first_cv.lambda)?;
    let weight = weight_matrix(&data.z, &first_fit.residuals)?;
    let second_cv = cross_validate(data, Some(&weight), cv)?;
    let second_fit = fit_lasso(data, Some(&weight), second_cv.lambda)?;
    Ok(TwoStepFit {
        first_cv,
        first_fit,
        weight,
        second_cv,
        second_fit,
    })
}

/// `(XᵀZ/n)(W/q)`, a `p×q` matrix.
fn moment_map(data: &Dataset, weight: &WeightMatrix) -> Result<Matrix> {
    if weight.len() != data.q() {
        return Err(GmmError::DimensionMismatch(format!(
            "weight matrix has {} entries for {} instruments",
            weight.len(),
            data.q()
        )));
    }
    let (n, q) = (data.n() as f64, data.q() as f64);
    let scale: Vec<f64> = weight.weights().iter().map(|w| w / (n * q)).collect();
    Ok(data.x.t_matmul(&data.z).scale_cols(&scale))
}

fn check_gamma(gamma: &ClimeResult, p: usize) -> Result<()> {
    if gamma.gamma_hat.rows() != p || gamma.gamma_hat.cols() != p {
        return Err(GmmError::DimensionMismatch(format!(
            "gamma is {}x{} for {} coefficients",
            gamma.gamma_hat.rows(),
            gamma.gamma_hat.cols(),
            p
        )));
    }
    Ok(())
}

/// `b̂ = β̂ + Γ̂ (XᵀZ/n)(Ŵ/q) Zᵀ(Y − Xβ̂)/n`.
pub fn debias(
    beta_hat: &[f64],
    gamma: &ClimeResult,
    data: &Dataset,
    weight: &WeightMatrix,
) -> Result<Vec<f64>> {
    let p = data.p();
    if beta_hat.len() != p {
        return Err(GmmError::DimensionMismatch(format!(
            "beta has {} entries for {} regressors",
            beta_hat.len(),
            p
        )));
    }
    check_gamma(gamma, p)?;
    let n = data.n() as f64;
    let u = data.residuals(beta_hat);
    let zu: Vec<f64> = data.z.t_matvec(&u).iter().map(|v| v / n).collect();
    let correction = gamma
        .gamma_hat
        .matvec(&moment_map(data, weight)?.matvec(&zu));
    Ok(beta_hat
        .iter()
        .zip(correction)
        .map(|(b, c)| b + c)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub v_hat_d: Matrix,
    pub sigma_zu_hat: Matrix,
    /// `e_jᵀ Γ̂ V̂_d Γ̂ᵀ e_j`, the asymptotic variance of `√n(b̂_j − β_j)`.
    pub coordinate_variance: Vec<f64>,
}

/// `Σ̂_Zu = n⁻¹ Σ_i Z_i Z_iᵀ û_i²`.
pub fn sigma_zu(z: &Matrix, residuals: &[f64]) -> Matrix {
    let n = z.rows() as f64;
    let weighted = z.scale_rows(&residuals.iter().map(|u| u * u / n).collect::<Vec<_>>());
    let mut s = weighted.t_matmul(z);
    // exact symmetry
    for i in 0..s.rows() {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Sandwich variance from the first-step residuals.
pub fn variance_estimate(
    gamma: &ClimeResult,
    data: &Dataset,
    weight: &WeightMatrix,
    first_step_residuals: &[f64],
) -> Result<VarianceEstimate> {
    if first_step_residuals.len() != data.n() {
        return Err(GmmError::DimensionMismatch(format!(
            "{} residuals for {} observations",
            first_step_residuals.len(),
            data.n()
        )));
    }
    check_gamma(gamma, data.p())?;
    let b = moment_map(data, weight)?;
    let sigma_zu_hat = sigma_zu(&data.z, first_step_residuals);
    let bs = b.matmul(&sigma_zu_hat);
    let mut v_hat_d = bs.matmul(&b.transpose());
    for i in 0..v_hat_d.rows() {
        for j in 0..i {
            let v = 0.5 * (v_hat_d[(i, j)] + v_hat_d[(j, i)]);
            v_hat_d[(i, j)] = v;
            v_hat_d[(j, i)] = v;
        }
    }
    let coordinate_variance: Vec<f64> = (0..data.p())
        .map(|j| {
            let g = gamma.gamma_hat.row(j);
            dot(g, &v_hat_d.matvec(g))
        })
        .collect();
    if let Some((index, &value)) = coordinate_variance
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0))
    {
        return Err(GmmError::NonPositiveVariance { index, value });
    }
    Ok(VarianceEstimate {
        v_hat_d,
        sigma_zu_hat,
        coordinate_variance,
    })
}

/// `√n (b̂_j − β_null) / σ̂_bj`.
pub fn t_statistic(b_hat_j: f64, variance_j: f64, n: usize, null_value: f64) -> Result<f64> {
    if !(variance_j > 0.0) {
        return Err(GmmError::NonPositiveVariance {
            index: 0,
            value: variance_j,
        });
    }
    Ok((n as f64).sqrt() * (b_hat_j - null_value) / variance_j.sqrt())
}

/// Symmetric intervals `b̂_j ± z_{1−α/2} σ̂_bj / √n`.
pub fn confidence_intervals(
    b_hat: &[f64],
    variances: &[f64],
    n: usize,
    alpha: f64,
) -> (Vec<f64>, Vec<f64>) {
    let z = two_sided_z(alpha);
    let sn = (n as f64).sqrt();
    b_hat
        .iter()
        .zip(variances)
        .map(|(b, v)| {
            let half = z * v.sqrt() / sn;
            (b - half, b + half)
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub beta_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    /// `σ̂_bj / √n`.
    pub se: Vec<f64>,
    pub null: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub alpha: f64,
}

impl InferenceResult {
    pub fn build(
        beta_hat: Vec<f64>,
        b_hat: Vec<f64>,
        variances: &[f64],
        n: usize,
        alpha: f64,
        null: Vec<f64>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(GmmError::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        if null.len() != b_hat.len() || variances.len() != b_hat.len() {
            return Err(GmmError::DimensionMismatch(format!(
                "null has {} and variances {} entries for {} coefficients",
                null.len(),
                variances.len(),
                b_hat.len()
            )));
        }
        let t_stats = b_hat
            .iter()
            .zip(variances)
            .zip(&null)
            .enumerate()
            .map(|(j, ((b, v), h))| {
                t_statistic(*b, *v, n, *h).map_err(|_| GmmError::NonPositiveVariance {
                    index: j,
                    value: *v,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (ci_lower, ci_upper) = confidence_intervals(&b_hat, variances, n, alpha);
        let sn = (n as f64).sqrt();
        Ok(Self {
            beta_hat,
            se: variances.iter().map(|v| v.sqrt() / sn).collect(),
            b_hat,
            null,
            t_stats,
            ci_lower,
            ci_upper,
            alpha,
        })
    }

    /// Two-sided rejection of `β_j = null_j` at level `alpha`.
    pub fn rejects(&self, j: usize) -> bool {
        self.t_stats[j].abs() > two_sided_z(self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub cv: CvConfig,
    pub alpha: f64,
    /// Hypothesised coefficients; zeros when absent.
    pub null: Option<Vec<f64>>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            cv: CvConfig::default(),
            alpha: 0.05,
            null: None,
        }
    }
}

/// Everything produced by a full estimation-and-inference run.
#[derive(Debug, Clone)]
pub struct DesparsifiedFit {
    pub two_step: TwoStepFit,
    pub sigma: SigmaHat,
    pub clime: ClimeResult,
    pub variance: VarianceEstimate,
    pub result: InferenceResult,
}

/// Stage names used when reporting failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TwoStep,
    Clime,
    Debias,
    Variance,
    Intervals,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::TwoStep => "two-step lasso-gmm",
            Stage::Clime => "clime",
            Stage::Debias => "debiasing",
            Stage::Variance => "variance estimation",
            Stage::Intervals => "confidence intervals",
        })
    }
}

pub fn desparsified_inference(
    data: &Dataset,
    config: &InferenceConfig,
) -> std::result::Result<DesparsifiedFit, (Stage, GmmError)> {
    let two_step = two_step_pipeline(data, &config.cv).map_err(|e| (Stage::TwoStep, e))?;
    let weight = &two_step.weight;
    let sigma = sigma_hat(data, Some(weight)).map_err(|e| (Stage::Clime, e))?;
    let clime = clime_full(&sigma).map_err(|e| (Stage::Clime, e))?;
    let b_hat =
        debias(&two_step.second_fit.beta, &clime, data, weight).map_err(|e| (Stage::Debias, e))?;
    let variance = variance_estimate(&clime, data, weight, &two_step.first_fit.residuals)
        .map_err(|e| (Stage::Variance, e))?;
    let null = config.null.clone().unwrap_or_else(|| vec![0.0; data.p()]);
    let result = InferenceResult::build(
        two_step.second_fit.beta.clone(),
        b_hat,
        &variance.coordinate_variance,
        data.n(),
        config.alpha,
        null,
    )
    .map_err(|e| (Stage::Intervals, e))?;
    Ok(DesparsifiedFit {
        two_step,
        sigma,
        clime,
        variance,
        result,
    })
}
