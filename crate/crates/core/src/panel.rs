//! First-differenced dynamic panels in cross-sectional GMM form.
//!
//! For `y_it = ρ y_{i,t−1} + x_itᵀδ + μ_i + u_it` with `y_i0 = 0`, differencing
//! removes `μ_i`. Each retained row `(i, t)`, `t = 3..T`, has outcome `Δy_it`,
//! regressors `(Δy_{i,t−1}, Δx_itᵀ)` and a block-sparse instrument row:
//!
//! * lagged levels `y_i1, …, y_{i,t−2}` in the period-`t` block, blocks
//!   ordered by `t` and lags ascending within a block;
//! * the full exogenous history `x_i1, …, x_iT` (period-major, then
//!   regressor) in the block for difference period `s = t`, one block for
//!   each `s = 2..T`.
//!
//! The `s = 2` block has no retained row and is therefore identically zero.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GmmError, Result};
use crate::numerics::{Matrix, RngState};

/// Number of instrument columns for `periods` periods and `regressors`
/// exogenous regressors.
pub fn instrument_count(periods: usize, regressors: usize) -> usize {
    let t = periods;
    (t - 2) * (t - 1) / 2 + t * (t - 1) * regressors
}

/// Generating values kept alongside simulated panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelTruth {
    pub rho0: f64,
    pub delta0: Vec<f64>,
    pub mu: Vec<f64>,
    /// `n×T`, row-major.
    pub u: Vec<f64>,
}

/// Balanced panel with `y_i0 = 0`; periods are numbered `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    units: usize,
    periods: usize,
    regressors: usize,
    /// `n×T`, row-major.
    y: Vec<f64>,
    /// `n×T×K`, unit-major, then period, then regressor.
    x: Vec<f64>,
    pub truth: Option<PanelTruth>,
}

impl PanelData {
    pub fn new(
        units: usize,
        periods: usize,
        regressors: usize,
        y: Vec<f64>,
        x: Vec<f64>,
    ) -> Result<Self> {
        if periods < 3 {
            return Err(GmmError::TooFewPeriods { periods });
        }
        if units == 0 {
            return Err(GmmError::EmptyInput);
        }
        if y.len() != units * periods || x.len() != units * periods * regressors {
            return Err(GmmError::DimensionMismatch(format!(
                "{} outcomes and {} regressor values for {units} units, {periods} periods, {regressors} regressors",
                y.len(),
                x.len()
            )));
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidArgument(
                "panel contains non-finite values".into(),
            ));
        }
        Ok(Self {
            units,
            periods,
            regressors,
            y,
            x,
            truth: None,
        })
    }

    /// Builds outcomes recursively from `y_i0 = 0`.
    pub fn from_components(
        periods: usize,
        rho0: f64,
        delta0: &[f64],
        mu: Vec<f64>,
        x: Vec<f64>,
        u: Vec<f64>,
    ) -> Result<Self> {
        let (n, k) = (mu.len(), delta0.len());
        if periods < 3 {
            return Err(GmmError::TooFewPeriods { periods });
        }
        if u.len() != n * periods || x.len() != n * periods * k {
            return Err(GmmError::DimensionMismatch(format!(
                "components do not match {n} units, {periods} periods, {k} regressors"
            )));
        }
        let mut y = vec![0.0; n * periods];
        for i in 0..n {
            let mut prev = 0.0;
            for t in 0..periods {
                let xs = &x[(i * periods + t) * k..(i * periods + t + 1) * k];
                let xd: f64 = xs.iter().zip(delta0).map(|(a, b)| a * b).sum();
                prev = rho0 * prev + xd + mu[i] + u[i * periods + t];
                y[i * periods + t] = prev;
            }
        }
        let mut panel = Self::new(n, periods, k, y, x)?;
        panel.truth = Some(PanelTruth {
            rho0,
            delta0: delta0.to_vec(),
            mu,
            u,
        });
        Ok(panel)
    }

    /// Assembles a balanced panel from long-format records
    /// `(unit, period, y, x_1..x_K)`. Units keep their order of first
    /// appearance; every unit must observe exactly the periods `1..=T`.
    pub fn from_long(records: &[(String, i64, f64, Vec<f64>)]) -> Result<Self> {
        let first = records.first().ok_or(GmmError::EmptyInput)?;
        let k = first.3.len();
        let mut units: Vec<&str> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut rows: Vec<Vec<(i64, f64, &[f64])>> = Vec::new();
        for (line, (unit, period, y, x)) in records.iter().enumerate() {
            if x.len() != k {
                return Err(GmmError::InvalidArgument(format!(
                    "record {} has {} regressors, expected {k}",
                    line + 1,
                    x.len()
                )));
            }
            let u = *index.entry(unit.as_str()).or_insert_with(|| {
                units.push(unit.as_str());
                rows.push(Vec::new());
                units.len() - 1
            });
            rows[u].push((*period, *y, x.as_slice()));
        }
        let periods = rows[0].len();
        let mut y = Vec::with_capacity(units.len() * periods);
        let mut x = Vec::with_capacity(units.len() * periods * k);
        for (u, r) in rows.iter_mut().enumerate() {
            r.sort_by_key(|e| e.0);
            let expected = (1..=periods as i64).collect::<Vec<_>>();
            if r.iter().map(|e| e.0).collect::<Vec<_>>() != expected {
                return Err(GmmError::InvalidArgument(format!(
                    "unbalanced panel: unit {} does not observe exactly periods 1..{}",
                    units[u], periods
                )));
            }
            for e in r.iter() {
                y.push(e.1);
                x.extend_from_slice(e.2);
            }
        }
        Self::new(units.len(), periods, k, y, x)
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn regressors(&self) -> usize {
        self.regressors
    }

    /// `y_it` for `t ∈ 0..=T`, with `y_i0 = 0`.
    pub fn y(&self, i: usize, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.y[i * self.periods + t - 1]
        }
    }

    /// `x_itk` for `t ∈ 1..=T`.
    pub fn x(&self, i: usize, t: usize, k: usize) -> f64 {
        self.x[(i * self.periods + t - 1) * self.regressors + k]
    }
}

/// Differenced panel in `(Y, X, Z)` form.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedGmm {
    pub y: Vec<f64>,
    pub x: Matrix,
    pub z: Matrix,
    pub periods: usize,
    pub regressors: usize,
}

impl StackedGmm {
    pub fn q(&self) -> usize {
        self.z.cols()
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::new(self.x, self.z, self.y)
    }
}

pub fn panel_to_gmm(panel: &PanelData) -> Result<StackedGmm> {
    let (n, tt, k) = (panel.units, panel.periods, panel.regressors);
    if tt < 3 {
        return Err(GmmError::TooFewPeriods { periods: tt });
    }
    let q = instrument_count(tt, k);
    let lagged_cols = (tt - 2) * (tt - 1) / 2;
    let rows = n * (tt - 2);
    let mut y = Vec::with_capacity(rows);
    let mut x = Matrix::zeros(rows, k + 1);
    let mut z = Matrix::zeros(rows, q);
    let mut r = 0;
    for i in 0..n {
        for t in 3..=tt {
            y.push(panel.y(i, t) - panel.y(i, t - 1));
            x[(r, 0)] = panel.y(i, t - 1) - panel.y(i, t - 2);
            for c in 0..k {
                x[(r, c + 1)] = panel.x(i, t, c) - panel.x(i, t - 1, c);
            }
            let zr = z.row_mut(r);
            let lag_offset = (t - 3) * (t - 2) / 2;
            for s in 1..=t - 2 {
                zr[lag_offset + s - 1] = panel.y(i, s);
            }
            let x_offset = lagged_cols + (t - 2) * tt * k;
            for s in 1..=tt {
                for c in 0..k {
                    zr[x_offset + (s - 1) * k + c] = panel.x(i, s, c);
                }
            }
            r += 1;
        }
    }
    Ok(StackedGmm {
        y,
        x,
        z,
        periods: tt,
        regressors: k,
    })
}

/// Standard-normal `μ_i`, `x_itk` and `u_it`, drawn unit by unit.
pub fn simulate_panel(
    units: usize,
    periods: usize,
    rho0: f64,
    delta0: &[f64],
    seed: u64,
) -> Result<PanelData> {
    if !(rho0.abs() < 1.0) {
        return Err(GmmError::InvalidSpec(format!(
            "|rho0| must be below 1, got {rho0}"
        )));
    }
    if periods < 3 {
        return Err(GmmError::TooFewPeriods { periods });
    }
    if units == 0 {
        return Err(GmmError::InvalidSpec(
            "at least one unit is required".into(),
        ));
    }
    let k = delta0.len();
    let mut rng = RngState::new(seed);
    let mut mu = Vec::with_capacity(units);
    let mut x = Vec::with_capacity(units * periods * k);
    let mut u = Vec::with_capacity(units * periods);
    for _ in 0..units {
        mu.push(rng.standard_normal());
        for _ in 0..periods {
            x.extend(rng.standard_normal_vector(k));
            u.push(rng.standard_normal());
        }
    }
    PanelData::from_components(periods, rho0, delta0, mu, x, u)
}
