use crate::error::{GmmError, Result};
use crate::numerics::Matrix;

/// Observations of the linear IV model `Y = Xβ + u` with instruments `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub z: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, z: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != z.rows() || x.rows() != y.len() {
            return Err(GmmError::DimensionMismatch(format!(
                "X has {} rows, Z has {} rows, Y has {} entries",
                x.rows(),
                z.rows(),
                y.len()
            )));
        }
        if x.rows() == 0 || x.cols() == 0 || z.cols() == 0 {
            return Err(GmmError::EmptyInput);
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(GmmError::NonFinite { row: i, col: 0 });
        }
        Ok(Self { x, z, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn q(&self) -> usize {
        self.z.cols()
    }

    /// `Y − X·beta`.
    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        let fitted = self.x.matvec(beta);
        self.y.iter().zip(fitted).map(|(y, f)| y - f).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }
}
