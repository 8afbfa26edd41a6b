//! Dense linear algebra and seeded random streams.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{qr_orthogonal, random_orthogonal, symmetric_eigenvalues};
pub(crate) use matrix::dot;
pub use matrix::{add_scaled, frobenius_inner, frobenius_norm, matmul, Matrix};
pub use rng::{gaussian_sample, Purpose, RngStream, StreamId};
