//! Tensors, reverse-mode differentiation and seeded randomness.

pub mod gradcheck;
pub mod prng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{central_difference, relative_error, FD_STEP};
pub use prng::{gaussian_sample, Prng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cross_entropy_logits, layer_norm, matmul, softmax_rows, Mask, Tensor, MASK_SENTINEL};
