//! Dense linear algebra and gradient verification.
//!
//! Everything is `f64`. There is no explicit inverse anywhere in the crate:
//! linear systems go through [`Cholesky`].

mod cholesky;
mod gradcheck;
mod matrix;

pub use cholesky::{spd_solve, Cholesky};
pub use gradcheck::grad_check;
pub use matrix::{dot, matmul, norm, Matrix};
