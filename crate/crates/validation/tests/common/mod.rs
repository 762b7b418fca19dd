//! Independent brute-force oracles built on nalgebra.

#![allow(dead_code)]

use hdgmm::numerics::{Matrix, RngState};
use nalgebra::{DMatrix, DVector};

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Minimum of `cᵀx` over `{Gx ≤ h, x ≥ 0}` by enumerating every basic point
/// of the constraint arrangement. `None` when no vertex is feasible.
pub fn lp_vertex_oracle(c: &[f64], g: &[Vec<f64>], h: &[f64]) -> Option<f64> {
    let n = c.len();
    let mut planes: Vec<(Vec<f64>, f64)> = g.iter().cloned().zip(h.iter().copied()).collect();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        planes.push((e, 0.0));
    }
    let mut best: Option<f64> = None;
    for subset in combinations(planes.len(), n) {
        let a = DMatrix::from_fn(n, n, |r, k| planes[subset[r]].0[k]);
        let b = DVector::from_fn(n, |r, _| planes[subset[r]].1);
        let Some(x) = a.lu().solve(&b) else { continue };
        let feasible = x.iter().all(|&v| v >= -1e-9)
            && g.iter().zip(h).all(|(row, hi)| {
                row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() <= hi + 1e-9
            });
        if feasible {
            let obj: f64 = c.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            best = Some(best.map_or(obj, |v: f64| v.min(obj)));
        }
    }
    best
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Penalized GMM objective `‖r − Aβ‖² + 2λ‖β‖₁` written out from the data,
/// with `r = W^{1/2}ZᵀY/(n√q)` and `A = W^{1/2}ZᵀX/(n√q)`.
pub struct GmmObjective {
    a: DMatrix<f64>,
    r: DVector<f64>,
    pub lambda: f64,
}

impl GmmObjective {
    pub fn new(x: &Matrix, z: &Matrix, y: &[f64], weights: &[f64], lambda: f64) -> Self {
        let (n, q) = (x.rows() as f64, z.cols() as f64);
        let (xn, zn) = (to_na(x), to_na(z));
        let yn = DVector::from_column_slice(y);
        let w = DMatrix::from_diagonal(&DVector::from_iterator(
            weights.len(),
            weights.iter().map(|v| v.sqrt()),
        ));
        let scale = 1.0 / (n * q.sqrt());
        Self {
            a: &w * zn.transpose() * xn * scale,
            r: &w * zn.transpose() * yn * scale,
            lambda,
        }
    }

    pub fn value(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        let res = &self.r - &self.a * b;
        res.norm_squared() + 2.0 * self.lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Unpenalized least-squares solution, used to size the search box.
    pub fn ls_scale(&self) -> f64 {
        let ata = self.a.transpose() * &self.a;
        let atr = self.a.transpose() * &self.r;
        ata.lu().solve(&atr).map(|s| s.amax()).unwrap_or(10.0)
    }
}

/// Minimizer of a convex function on a `p ≤ 2` box by repeated grid
/// refinement down to a spacing of `final_step`.
pub fn grid_minimize(
    f: impl Fn(&[f64]) -> f64,
    p: usize,
    half_width: f64,
    final_step: f64,
) -> Vec<f64> {
    let mut center = vec![0.0; p];
    let mut width = half_width;
    let points = 80;
    loop {
        let step = 2.0 * width / points as f64;
        let mut best = (f64::INFINITY, center.clone());
        let axis = |c: f64, i: usize| c - width + step * i as f64;
        if p == 1 {
            for i in 0..=points {
                let b = [axis(center[0], i)];
                let v = f(&b);
                if v < best.0 {
                    best = (v, b.to_vec());
                }
            }
        } else {
            for i in 0..=points {
                for k in 0..=points {
                    let b = [axis(center[0], i), axis(center[1], k)];
                    let v = f(&b);
                    if v < best.0 {
                        best = (v, b.to_vec());
                    }
                }
            }
        }
        center = best.1;
        if step <= final_step {
            return center;
        }
        width = 4.0 * step;
    }
}

/// Two-step GMM closed form `(XᵀZ W ZᵀX)⁻¹ XᵀZ W ZᵀY`.
pub fn classical_gmm(x: &Matrix, z: &Matrix, y: &[f64], weights: &[f64]) -> Vec<f64> {
    let (xn, zn) = (to_na(x), to_na(z));
    let yn = DVector::from_column_slice(y);
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
    let xz = xn.transpose() * &zn;
    let lhs = &xz * &w * xz.transpose();
    let rhs = &xz * &w * (zn.transpose() * yn);
    lhs.lu()
        .solve(&rhs)
        .expect("invertible")
        .as_slice()
        .to_vec()
}

pub fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}
