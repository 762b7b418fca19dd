//! Monte Carlo designs with many instruments and heteroskedastic errors.
//!
//! Every design draws `Z_i ~ N_q(0, Ω)` with `Ω_jk = ρ_z^|j−k|`, sets
//! `X_i = πᵀZ_i + v_i` and `Y_i = X_iᵀβ₀ + u_i`, where the structural error
//! is scaled by `‖Z_i‖₂/√q`. The designs differ only in the first-stage
//! matrix `π`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::error::{GmmError, Result};
use crate::inference::kkt_violation_raw;
use crate::inference::{desparsified_inference, two_step_pipeline, InferenceConfig, Stage};
use crate::lasso_gmm::{CvConfig, LambdaGrid};
use crate::numerics::{cholesky, l1_norm, mix_seed, Matrix, RngState};
use crate::stats::two_sided_z;

/// Replications per sample size in the ℓ₁-error diagnostic.
pub const ELL1_REPS: usize = 20;

/// Coordinate (zero-based) tested for size and power.
pub const TESTED_COORDINATE: usize = 1;

fn default_rho_z() -> f64 {
    0.5
}
fn default_rho_uv() -> f64 {
    0.25
}
fn default_reps() -> usize {
    100
}
fn default_folds() -> usize {
    5
}
fn default_grid_size() -> usize {
    50
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub design_id: u8,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    #[serde(default = "default_rho_z")]
    pub rho_z: f64,
    #[serde(default = "default_rho_uv")]
    pub rho_uv: f64,
    /// Overrides the default coefficient vector when present.
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub base_seed: u64,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl DesignSpec {
    pub fn new(design_id: u8, n: usize, p: usize, q: usize, reps: usize, base_seed: u64) -> Self {
        Self {
            design_id,
            n,
            p,
            q,
            rho_z: default_rho_z(),
            rho_uv: default_rho_uv(),
            beta0: None,
            reps,
            base_seed,
            cv_folds: default_folds(),
            grid_size: default_grid_size(),
            alpha: default_alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GmmError::InvalidSpec(m));
        if !(1..=3).contains(&self.design_id) {
            return bad(format!("design must be 1, 2 or 3, got {}", self.design_id));
        }
        if self.n == 0 || self.p == 0 || self.q == 0 {
            return bad("n, p and q must be positive".into());
        }
        if self.design_id == 1 && self.q != 2 * self.p {
            return bad(format!(
                "design 1 needs q = 2p (p = {}, q = {})",
                self.p, self.q
            ));
        }
        if self.design_id == 3 && !self.q.is_multiple_of(4) {
            return bad(format!("design 3 needs q divisible by 4 (q = {})", self.q));
        }
        if !(self.rho_z.abs() < 1.0) {
            return bad(format!("rho_z must lie in (-1, 1), got {}", self.rho_z));
        }
        if !(0.0..=1.0).contains(&self.rho_uv) {
            return bad(format!("rho_uv must lie in [0, 1], got {}", self.rho_uv));
        }
        if self.reps == 0 {
            return bad("at least one replication is required".into());
        }
        if self.cv_folds < 2 || self.n < self.cv_folds {
            return bad(format!(
                "need 2 <= folds <= n (folds = {}, n = {})",
                self.cv_folds, self.n
            ));
        }
        if self.grid_size == 0 {
            return bad("grid size must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if let Some(b) = &self.beta0 {
            if b.len() != self.p || b.iter().any(|v| !v.is_finite()) {
                return bad(format!("beta0 must hold {} finite values", self.p));
            }
        }
        Ok(())
    }

    /// Three non-zero entries: `(1, 1, 0, …, 0, 0.5, 0, 0, 0, 0, 0)` for
    /// `p ≥ 8`; `(1, 1, 0.5, 0, …)` truncated to `p` otherwise.
    pub fn beta0(&self) -> Vec<f64> {
        if let Some(b) = &self.beta0 {
            return b.clone();
        }
        let p = self.p;
        let mut b = vec![0.0; p];
        if p >= 8 {
            b[0] = 1.0;
            b[1] = 1.0;
            b[p - 6] = 0.5;
        } else {
            for (bj, v) in b.iter_mut().zip([1.0, 1.0, 0.5]) {
                *bj = v;
            }
        }
        b
    }

    /// False when the coefficient layout had to be shortened for `p < 8`.
    pub fn canonical_beta0(&self) -> bool {
        self.beta0.is_some() || self.p >= 8
    }

    pub fn power_shift(&self) -> f64 {
        if self.design_id == 1 {
            0.5
        } else {
            1.5
        }
    }

    pub fn omega(&self) -> Matrix {
        Matrix::from_fn(self.q, self.q, |j, k| {
            self.rho_z.powi((j as i32 - k as i32).abs())
        })
    }

    /// First-stage coefficients, `q×p`.
    pub fn pi(&self) -> Matrix {
        let (p, q) = (self.p, self.q);
        match self.design_id {
            1 => {
                let c = (2.0 + 2.0 * self.rho_z.powi((q / 2) as i32)).powf(-0.5);
                Matrix::from_fn(q, p, |l, j| if l % (q / 2) == j { c } else { 0.0 })
            }
            2 => Matrix::from_fn(q, p, |_, _| 1.0 / q as f64),
            _ => Matrix::from_fn(q, p, |l, _| if l < q / 4 { 0.25 } else { 0.0 }),
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            cv: CvConfig {
                folds: self.cv_folds,
                grid: LambdaGrid::Auto {
                    count: self.grid_size,
                },
            },
            alpha: self.alpha,
            null: None,
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }
}

/// A simulated sample together with the errors that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub data: Dataset,
    pub beta0: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Matrix,
}

/// Draws replication `rep_index` of the design.
pub fn generate_dataset(spec: &DesignSpec, rep_index: usize) -> Result<SimulatedSample> {
    spec.validate()?;
    let chol = cholesky(&spec.omega())?;
    Ok(generate_with(spec, &chol, &spec.pi(), rep_index))
}

fn generate_with(
    spec: &DesignSpec,
    chol: &Matrix,
    pi: &Matrix,
    rep_index: usize,
) -> SimulatedSample {
    let (n, p, q) = (spec.n, spec.p, spec.q);
    let beta0 = spec.beta0();
    let mut rng = RngState::new(mix_seed(spec.base_seed, rep_index as u64));
    let (a, b) = (spec.rho_uv.sqrt(), (1.0 - spec.rho_uv).sqrt());
    let sq = (q as f64).sqrt();

    let mut z = Matrix::zeros(n, q);
    let mut x = Matrix::zeros(n, p);
    let mut v = Matrix::zeros(n, p);
    let mut u = vec![0.0; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let zi = crate::numerics::correlated_normal(&mut rng, chol);
        let eps = rng.standard_normal_vector(p + 2);
        let u_tilde = a * eps[0] + b * eps[1];
        let norm = zi.iter().map(|t| t * t).sum::<f64>().sqrt();
        u[i] = u_tilde * norm / sq;
        let xi = pi.t_matvec(&zi);
        for j in 0..p {
            v[(i, j)] = a * eps[0] + b * eps[2 + j];
            x[(i, j)] = xi[j] + v[(i, j)];
        }
        y[i] = crate::numerics::dot(x.row(i), &beta0) + u[i];
        z.row_mut(i).copy_from_slice(&zi);
    }
    SimulatedSample {
        data: Dataset { x, z, y },
        beta0,
        u,
        v,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub reject_size: bool,
    pub reject_power: bool,
    pub covered: Vec<bool>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub ci_lengths: Vec<f64>,
    /// `‖b̂ − β₀‖₂²`.
    pub sq_error: f64,
    /// t-statistic at the tested coordinate against the truth.
    pub t_size: f64,
    /// `√n (Γ̂Σ̂ − I)(β̂ − β₀)` at the tested coordinate.
    pub delta_diag: Option<f64>,
    /// `‖β̂ − β₀‖₁` for the second-step lasso estimate.
    pub ell1_error: f64,
    /// Largest stationarity violation over every lasso fit.
    pub max_kkt_gap: f64,
    pub lasso_fits: usize,
    /// Largest `‖Γ̂_jΣ̂ − e_j‖∞ − μ_j` over CLIME rows.
    pub max_clime_excess: f64,
    pub clime_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("replication {rep_index} (seed {seed}) failed in {stage}: {source}")]
pub struct ReplicationFailure {
    pub rep_index: usize,
    pub seed: u64,
    pub stage: String,
    pub source: GmmError,
}

/// Runs the full pipeline on one replication.
pub fn run_replication(
    spec: &DesignSpec,
    rep_index: usize,
) -> std::result::Result<ReplicationOutcome, ReplicationFailure> {
    let fail = |stage: String, source: GmmError| ReplicationFailure {
        rep_index,
        seed: mix_seed(spec.base_seed, rep_index as u64),
        stage,
        source,
    };
    spec.validate()
        .map_err(|e| fail("specification".into(), e))?;
    let chol = cholesky(&spec.omega()).map_err(|e| fail("specification".into(), e))?;
    replicate_with(spec, &chol, &spec.pi(), rep_index, &fail)
}

fn replicate_with(
    spec: &DesignSpec,
    chol: &Matrix,
    pi: &Matrix,
    rep_index: usize,
    fail: &dyn Fn(String, GmmError) -> ReplicationFailure,
) -> std::result::Result<ReplicationOutcome, ReplicationFailure> {
    let sample = generate_with(spec, chol, pi, rep_index);
    let data = &sample.data;
    let beta0 = &sample.beta0;
    let fit = desparsified_inference(data, &spec.inference_config())
        .map_err(|(stage, e): (Stage, GmmError)| fail(stage.to_string(), e))?;
    let res = &fit.result;
    let n = data.n();
    let j = TESTED_COORDINATE.min(spec.p - 1);
    let z = two_sided_z(spec.alpha);
    let var_j = fit.variance.coordinate_variance[j];
    let t_at = |h: f64| (n as f64).sqrt() * (res.b_hat[j] - h) / var_j.sqrt();
    let t_size = t_at(beta0[j]);
    let t_power = t_at(beta0[j] + spec.power_shift());

    let covered = (0..spec.p)
        .map(|k| res.ci_lower[k] <= beta0[k] && beta0[k] <= res.ci_upper[k])
        .collect();
    let ci_lengths = (0..spec.p)
        .map(|k| res.ci_upper[k] - res.ci_lower[k])
        .collect();
    let sq_error = res
        .b_hat
        .iter()
        .zip(beta0)
        .map(|(b, t)| (b - t) * (b - t))
        .sum();

    let beta_hat = &fit.two_step.second_fit.beta;
    let err: Vec<f64> = beta_hat.iter().zip(beta0).map(|(b, t)| b - t).collect();
    let g_sigma_row = fit.sigma.matrix().t_matvec(fit.clime.gamma_hat.row(j));
    let delta = (n as f64).sqrt() * (crate::numerics::dot(&g_sigma_row, &err) - err[j]);
    let ell1_error = l1_norm(&err).map_err(|e| fail("diagnostics".into(), e))?;

    let ts = &fit.two_step;
    let raw_first = kkt_violation_raw(data, None, &ts.first_fit.beta, ts.first_fit.lambda);
    let raw_second = kkt_violation_raw(
        data,
        Some(&ts.weight),
        &ts.second_fit.beta,
        ts.second_fit.lambda,
    );
    Ok(ReplicationOutcome {
        reject_size: t_size.abs() > z,
        reject_power: t_power.abs() > z,
        covered,
        ci_lower: res.ci_lower.clone(),
        ci_upper: res.ci_upper.clone(),
        ci_lengths,
        sq_error,
        t_size,
        delta_diag: Some(delta),
        ell1_error,
        max_kkt_gap: ts.max_kkt_gap().max(raw_first).max(raw_second),
        lasso_fits: ts.fits(),
        max_clime_excess: fit.clime.max_excess(),
        clime_rows: spec.p,
    })
}

/// Five performance measures. Coverage, length and MSE are averaged over
/// all coefficients and replications; size and power are rejection rates
/// at the tested coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub size: f64,
    pub power: f64,
    pub coverage: f64,
    pub length: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub spec: DesignSpec,
    pub summary: SummaryTable,
    pub canonical_beta0: bool,
    pub max_kkt_gap: f64,
    pub lasso_fits: usize,
    pub max_clime_excess: f64,
    pub clime_rows: usize,
    pub outcomes: Vec<ReplicationOutcome>,
}

/// Aggregates outcomes in replication order.
pub fn summarize(outcomes: &[ReplicationOutcome]) -> SummaryTable {
    let b = outcomes.len() as f64;
    let frac = |f: &dyn Fn(&ReplicationOutcome) -> bool| {
        outcomes.iter().filter(|o| f(o)).count() as f64 / b
    };
    let cells: usize = outcomes.iter().map(|o| o.covered.len()).sum();
    let covered: usize = outcomes
        .iter()
        .map(|o| o.covered.iter().filter(|&&c| c).count())
        .sum();
    let length: f64 = outcomes.iter().flat_map(|o| o.ci_lengths.iter()).sum();
    SummaryTable {
        size: frac(&|o| o.reject_size),
        power: frac(&|o| o.reject_power),
        coverage: covered as f64 / cells as f64,
        length: length / cells as f64,
        mse: outcomes.iter().map(|o| o.sq_error).sum::<f64>() / cells as f64,
    }
}

/// Runs every replication (in parallel) and aggregates the five measures.
pub fn run_design(spec: &DesignSpec) -> std::result::Result<SimulationReport, ReplicationFailure> {
    let setup = |e| ReplicationFailure {
        rep_index: 0,
        seed: spec.base_seed,
        stage: "specification".into(),
        source: e,
    };
    spec.validate().map_err(setup)?;
    let chol = cholesky(&spec.omega()).map_err(setup)?;
    let pi = spec.pi();
    let outcomes = (0..spec.reps)
        .into_par_iter()
        .map(|r| {
            let fail = |stage: String, source: GmmError| ReplicationFailure {
                rep_index: r,
                seed: mix_seed(spec.base_seed, r as u64),
                stage,
                source,
            };
            replicate_with(spec, &chol, &pi, r, &fail)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SimulationReport {
        spec: spec.clone(),
        summary: summarize(&outcomes),
        canonical_beta0: spec.canonical_beta0(),
        max_kkt_gap: outcomes.iter().map(|o| o.max_kkt_gap).fold(0.0, f64::max),
        lasso_fits: outcomes.iter().map(|o| o.lasso_fits).sum(),
        max_clime_excess: outcomes
            .iter()
            .map(|o| o.max_clime_excess)
            .fold(f64::NEG_INFINITY, f64::max),
        clime_rows: outcomes.iter().map(|o| o.clime_rows).sum(),
        outcomes,
    })
}

/// Mean `‖β̂ − β₀‖₁` of the second-step lasso estimate over
/// [`ELL1_REPS`] replications for each sample size.
pub fn ell1_error_diagnostic(
    spec: &DesignSpec,
    n_list: &[usize],
) -> std::result::Result<Vec<f64>, ReplicationFailure> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ReplicationFailure {
            rep_index: 0,
            seed: spec.base_seed,
            stage: "specification".into(),
            source: GmmError::InvalidSpec("sample sizes must be strictly increasing".into()),
        });
    }
    n_list
        .iter()
        .map(|&n| {
            let s = DesignSpec {
                reps: ELL1_REPS,
                ..spec.with_n(n)
            };
            let cv = s.inference_config().cv;
            let errors = (0..ELL1_REPS)
                .into_par_iter()
                .map(|r| {
                    let fail = |stage: &str, source| ReplicationFailure {
                        rep_index: r,
                        seed: mix_seed(s.base_seed, r as u64),
                        stage: stage.into(),
                        source,
                    };
                    let sample = generate_dataset(&s, r).map_err(|e| fail("specification", e))?;
                    let fit = two_step_pipeline(&sample.data, &cv)
                        .map_err(|e| fail("two-step lasso-gmm", e))?;
                    Ok(fit
                        .second_fit
                        .beta
                        .iter()
                        .zip(&sample.beta0)
                        .map(|(b, t)| (b - t).abs())
                        .sum::<f64>())
                })
                .collect::<std::result::Result<Vec<f64>, ReplicationFailure>>()?;
            Ok(errors.iter().sum::<f64>() / ELL1_REPS as f64)
        })
        .collect()
}
