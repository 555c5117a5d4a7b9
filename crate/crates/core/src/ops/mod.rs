//! Differentiable primitives, implemented as methods on [`crate::graph::Graph`].

mod basic;
mod fft;
mod linalg;
mod nn;

pub use fft::naive_dft_mag2_diff;
pub use linalg::matmul_naive;
