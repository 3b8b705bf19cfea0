//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use graph::{Graph, Var};
