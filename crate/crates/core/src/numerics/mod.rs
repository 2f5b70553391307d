//! Dense tensors, reverse-mode gradients and seeded sampling.

mod gradcheck;
pub mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, max_relative_error, relative_error, RELATIVE_ERROR_FLOOR};
pub use ops::{
    add, affine, argmax, cross_entropy, log_sigmoid, matmul, mul, relu, scale, softmax,
    softmax_values, straight_through, sub, sum, weighted_sum,
};
pub use rng::{gumbel_transform, sample_gumbel, RngSnapshot, RngState};
pub use tensor::Tensor;
