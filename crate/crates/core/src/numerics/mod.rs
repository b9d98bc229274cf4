//! Dense tensors and a reverse-mode autodiff tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{sigmoid, softmax_into, softplus, Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Reduction selector for [`reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Sum or mean over all elements, or along `axis` when given.
pub fn reduce(
    tape: &mut Tape,
    op: Reduction,
    a: Var,
    axis: Option<usize>,
) -> crate::error::Result<Var> {
    match (op, axis) {
        (Reduction::Sum, None) => Ok(tape.sum(a)),
        (Reduction::Mean, None) => Ok(tape.mean(a)),
        (Reduction::Sum, Some(ax)) => tape.sum_axis(a, ax),
        (Reduction::Mean, Some(ax)) => tape.mean_axis(a, ax),
    }
}
