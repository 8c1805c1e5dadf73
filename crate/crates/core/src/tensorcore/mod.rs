//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Covers exactly the primitives the multigrid layers use: 3×3 same-size
//! convolution, 2×2 max-pooling, 2× nearest-neighbour upsampling, channel
//! concatenation and slicing, elementwise arithmetic and activations, batch
//! normalization, a dense map for vector heads and a logistic loss.

mod gradcheck;
mod graph;
mod norm;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Unary, Var};
pub use norm::{NormMode, NormState, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Shape, Tensor};
