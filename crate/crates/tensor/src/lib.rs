//! Minimal dense numeric kernel for the MIGC model: shaped `f64` tensors,
//! softmax and attention kernels, a tape-based autodiff [`Graph`], trainable
//! blocks (linear, MLP, convolution, group norm, CBAM), the Fourier box
//! embedding, and a finite-difference gradient checker.

pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use fourier::{fourier_embed, FourierSpec};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{scaled_dot_attention, softmax, MASKED};
pub use params::{AdamW, AdamWConfig, Init, Param, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

/// Attention head configuration. The logit scale is exactly `1/√head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(head_dim: usize, num_heads: usize) -> Result<Self> {
        if head_dim == 0 || num_heads == 0 {
            return Err(TensorError::Invalid {
                op: "AttentionConfig",
                msg: "head_dim and num_heads must be positive".into(),
            });
        }
        Ok(Self { head_dim, num_heads })
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            head_dim: 32,
            num_heads: 1,
        }
    }
}
