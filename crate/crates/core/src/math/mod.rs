//! Dense arithmetic and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{default_step, finite_difference_check};
pub use matrix::{argmax, cosine_similarity_matrix, dot, scaled_softmax, DenseMatrix};
pub(crate) use matrix::hex;
pub use tape::{Gradients, Parameter, ScalarLoss, Tape, Var, LOG_FLOOR};
