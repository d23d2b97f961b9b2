//! Minimal 64-bit numeric layer: dense tensors, the forward/backward
//! primitives used by the encoders, Adam, and a finite-difference checker.

pub mod adam;
pub mod affine;
pub mod attention;
pub mod gradcheck;
pub mod lstm;
pub mod params;
pub mod softmax;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use affine::{affine, affine_backward, Affine};
pub use attention::{attention_block, attention_block_backward, AttentionCache, AttentionParams, LayerNorm};
pub use gradcheck::{grad_check, GradCheck};
pub use lstm::{lstm_sequence, lstm_sequence_backward, lstm_step, lstm_step_backward, LstmParams};
pub use params::Parameters;
pub use softmax::{softmax_rows, softmax_xent, softmax_xent_backward, SoftmaxXent};
pub use tensor::{gemm, Tensor};
