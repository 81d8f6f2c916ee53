//! Dense `f64` tensors and a record-on-execute autodiff tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{log_softmax_row, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;
