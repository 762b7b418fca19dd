//! High-dimensional linear GMM with many instruments: lasso-penalized GMM,
//! CLIME-based desparsification and robust inference.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod inference;
pub mod lasso_gmm;
pub mod lp_clime;
pub mod numerics;
pub mod panel;
pub mod simulate;
pub mod stats;

pub use data::Dataset;
pub use error::{GmmError, Result};
