//! Desk-scale state-space sequence modeling for multichannel biosignals.
//!
//! Everything runs on a small dependency-free numeric core: dense f64 tensors,
//! tape-based reverse-mode differentiation, and hand-written kernels. On top of
//! that sit the selective state-space blocks, temporal masking, spatial channel
//! re-projection, the full encoder/decoder network, the masked-reconstruction
//! objective, training, probing, synthetic data, and runtime benchmarks.

pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod masking;
pub mod model;
pub mod montage;
pub mod objective;
pub mod ops;
pub mod probing;
pub mod saie;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use graph::{Graph, ValId};
pub use tensor::Tensor;
