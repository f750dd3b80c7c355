//! Dense tensors, the nonlinearities used by the network, and reverse-mode
//! differentiation.

mod gradcheck;
pub mod ops;
mod sparse;
pub mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_floored, GradCheckReport};
pub use ops::{gelu, layer_norm, matmul, softmax_rows, transpose, DEFAULT_LN_EPS};
pub use sparse::SparseMatrix;
pub use tape::{AttentionShape, Gradients, Graph, Var};
pub use tensor::Tensor;
