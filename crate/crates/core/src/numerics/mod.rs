//! Dense tensors and reverse-mode differentiation.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
