//! Dense linear algebra, statistics and scalar activations.

mod activation;
mod matrix;
mod real;
mod stats;

pub use activation::{
    argmax, leaky_relu, sigmoid, silu, silu_grad, softmax, DEFAULT_NEGATIVE_SLOPE,
};
pub use matrix::Matrix;
pub use real::{DType, Real};
pub use stats::{
    cholesky, covariance, default_ridge, partial_corr, pearson, pearson_corr_matrix,
    precision_ridge, spd_inverse,
};
