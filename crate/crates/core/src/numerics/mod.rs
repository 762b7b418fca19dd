//! Dense linear algebra, norms and seeded random generation.

mod matrix;
mod rng;

pub use matrix::{
    cholesky, dot, inverse, l1_norm, l2_norm, matrix_max_norm, max_abs, solve, Matrix,
};
pub use rng::{correlated_normal, mix_seed, standard_normal_vector, RngState, SEED_MIX};
