//! Reverse-mode automatic differentiation on a define-by-run tape.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
