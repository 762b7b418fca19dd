//! Linear programming and the CLIME approximate inverse built on it.

mod clime;
mod simplex;

pub use clime::{
    clime_full, clime_infimum, clime_mu, clime_row, row_residual, sigma_hat, ClimeResult, SigmaHat,
    MU_FACTOR, MU_FLOOR,
};
pub use simplex::{lp_solve, LpProblem, LpSolution};
