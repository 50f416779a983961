//! Shift-add compression of feed-forward network layers.
//!
//! The crate turns dense and convolutional layers into multiplier-free
//! adder programs. Compression happens in three stages: group-lasso
//! regularized training prunes whole input columns (or kernels), weight
//! sharing ties similar columns to a common centroid, and linear
//! computation coding (LCC) factors what remains into sparse matrices of
//! signed powers of two. Costs are counted in additions and compared with a
//! canonically-signed-digit (CSD) baseline.
//!
//! Module map:
//!
//! - [`numerics`]: fixed-point grid, CSD encoding, cost accounting, SQNR.
//! - [`lcc`]: FP / FS decompositions, adder programs, serialization.
//! - [`pruning`]: group structures, group lasso, block soft thresholding.
//! - [`sharing`]: affinity propagation and tied (shared) layers.
//! - [`convlower`]: FK / PK lowering of convolutions to matrix products.
//! - [`nncore`]: a small deterministic training stack and MNIST loader.
//! - [`pipeline`]: the end-to-end compression run, reports and checkpoints.

pub mod convlower;
pub mod error;
pub mod lcc;
pub mod nncore;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod pruning;
pub mod sharing;

pub use error::{Error, Result};
