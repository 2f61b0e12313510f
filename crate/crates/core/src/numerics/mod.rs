//! Dense tensors, reverse-mode differentiation, seeded sampling and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use rng::{seeded_gaussian, RngState, SeededRng};
pub use tensor::{matmul, Tensor};

#[cfg(test)]
pub(crate) use graph::softmax_rows;
pub(crate) use tensor::check_probability;
