//! Dense two-phase primal simplex with Bland's rule.
//!
//! Solves `min cᵀx  s.t.  Gx ≤ h, x ≥ 0`. Rows with `h_i ≥ 0` get a slack
//! that starts basic; rows with `h_i < 0` are negated, receive a surplus
//! column and an artificial variable, and phase one drives the artificials
//! out. Entering and leaving variables are both chosen by lowest index, which
//! rules out cycling. Once phase two stops, the basic solution is recomputed
//! from the original data by a direct solve with the final basis so that
//! rounding accumulated over the pivots does not leak into the answer.

use crate::error::{GmmError, Result};
use crate::numerics::{solve, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub c: Vec<f64>,
    pub g: Matrix,
    pub h: Vec<f64>,
}

impl LpProblem {
    pub fn new(c: Vec<f64>, g: Matrix, h: Vec<f64>) -> Result<Self> {
        if g.rows() == 0 || g.cols() == 0 {
            return Err(GmmError::EmptyInput);
        }
        if c.len() != g.cols() || h.len() != g.rows() {
            return Err(GmmError::DimensionMismatch(format!(
                "objective {} / constraints {}x{} / bounds {}",
                c.len(),
                g.rows(),
                g.cols(),
                h.len()
            )));
        }
        if c.iter().chain(&h).any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidArgument("non-finite LP data".into()));
        }
        Ok(Self { c, g, h })
    }

    pub fn num_vars(&self) -> usize {
        self.g.cols()
    }

    pub fn num_constraints(&self) -> usize {
        self.g.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

struct Tableau {
    /// `rows × cols` coefficients followed by the right-hand side column.
    t: Vec<Vec<f64>>,
    /// Reduced-cost row; last entry holds minus the objective value.
    obj: Vec<f64>,
    basis: Vec<usize>,
    /// Original standard-form row index of every tableau row.
    origin: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let piv = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= piv;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                row[c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, p) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * p;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    fn set_objective(&mut self, cost: &[f64]) {
        let mut obj = cost.to_vec();
        obj.push(0.0);
        for (i, row) in self.t.iter().enumerate() {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (o, v) in obj.iter_mut().zip(row) {
                    *o -= cb * v;
                }
            }
        }
        self.obj = obj;
    }

    /// Runs Bland pivots until optimal. `allowed` masks enterable columns.
    fn optimize(&mut self, allowed: &[bool], pivots: &mut usize, cap: usize) -> Result<()> {
        let scale = self.obj[..self.cols]
            .iter()
            .fold(1.0_f64, |m, v| m.max(v.abs()));
        let cost_tol = 1e-11 * scale;
        const PIVOT_TOL: f64 = 1e-11;
        loop {
            let entering = (0..self.cols).find(|&j| allowed[j] && self.obj[j] < -cost_tol);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.t.len() {
                let a = self.t[i][col];
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.rhs(i).max(0.0) / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        let tie = 1e-12 * (1.0 + br.abs());
                        if ratio < br - tie || (ratio <= br + tie && self.basis[i] < self.basis[bi])
                        {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
            let Some((row, _)) = leave else {
                return Err(GmmError::Unbounded);
            };
            self.pivot(row, col);
            *pivots += 1;
            if *pivots > cap {
                return Err(GmmError::CycleDetected {
                    iterations: *pivots,
                });
            }
        }
    }
}

pub fn lp_solve(problem: &LpProblem) -> Result<LpSolution> {
    let m = problem.num_constraints();
    let d = problem.num_vars();
    let art_rows: Vec<usize> = (0..m).filter(|&i| problem.h[i] < 0.0).collect();
    let n_art = art_rows.len();
    let cols = d + m + n_art;

    // standard form [G | ±I | art] with non-negative right-hand side
    let mut std_rows = Vec::with_capacity(m);
    let mut std_rhs = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art_index = 0;
    for i in 0..m {
        let mut row = vec![0.0; cols];
        let neg = problem.h[i] < 0.0;
        let sign = if neg { -1.0 } else { 1.0 };
        for (j, v) in problem.g.row(i).iter().enumerate() {
            row[j] = sign * v;
        }
        row[d + i] = sign;
        if neg {
            row[d + m + art_index] = 1.0;
            basis.push(d + m + art_index);
            art_index += 1;
        } else {
            basis.push(d + i);
        }
        std_rows.push(row);
        std_rhs.push(sign * problem.h[i]);
    }

    let mut tab = Tableau {
        t: std_rows
            .iter()
            .zip(&std_rhs)
            .map(|(r, b)| {
                let mut row = r.clone();
                row.push(*b);
                row
            })
            .collect(),
        obj: Vec::new(),
        basis,
        origin: (0..m).collect(),
        cols,
    };
    let cap = 50_000 + 200 * (m + cols);
    let mut pivots = 0;

    if n_art > 0 {
        let mut phase1_cost = vec![0.0; cols];
        for c in phase1_cost.iter_mut().skip(d + m) {
            *c = 1.0;
        }
        tab.set_objective(&phase1_cost);
        let allowed = vec![true; cols];
        tab.optimize(&allowed, &mut pivots, cap)?;
        let residual = -tab.obj[cols];
        let h_scale = problem.h.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        if residual > 1e-9 * h_scale {
            return Err(GmmError::Infeasible { residual });
        }
        // drive zero-level artificials out of the basis, dropping redundant rows
        let mut i = 0;
        while i < tab.t.len() {
            if tab.basis[i] >= d + m {
                let row = &tab.t[i];
                let mut best: Option<(usize, f64)> = None;
                for (j, &v) in row.iter().enumerate().take(d + m) {
                    if v.abs() > 1e-9 && best.is_none_or(|(_, bv)| v.abs() > bv) {
                        best = Some((j, v.abs()));
                    }
                }
                match best {
                    Some((j, _)) => {
                        tab.pivot(i, j);
                        i += 1;
                    }
                    None => {
                        tab.t.remove(i);
                        tab.basis.remove(i);
                        tab.origin.remove(i);
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..d].copy_from_slice(&problem.c);
    tab.set_objective(&cost);
    let mut allowed = vec![true; cols];
    for a in allowed.iter_mut().skip(d + m) {
        *a = false;
    }
    tab.optimize(&allowed, &mut pivots, cap)?;

    // recompute the basic solution from the original data
    let k = tab.t.len();
    let basis_matrix = Matrix::from_fn(k, k, |r, c| std_rows[tab.origin[r]][tab.basis[c]]);
    let rhs: Vec<f64> = tab.origin.iter().map(|&r| std_rhs[r]).collect();
    let xb = solve(&basis_matrix, &rhs).unwrap_or_else(|| (0..k).map(|i| tab.rhs(i)).collect());
    let mut x = vec![0.0; d];
    for (slot, &var) in tab.basis.iter().enumerate() {
        if var < d {
            x[var] = xb[slot].max(0.0);
        }
    }
    let objective = problem.c.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        x,
        objective,
        pivots,
    })
}
