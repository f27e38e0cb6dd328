//! Two-phase quantization-aware training for small decoder-only
//! transformers.
//!
//! Phase one trains each transformer block in turn against its
//! full-precision outputs while updating latent weights, step sizes and
//! zero points ([`block_ap`]). Phase two freezes the integer weights and
//! trains only step sizes end to end on next-token loss ([`e2e_qp`]).
//! Quantized models are stored in a packed container ([`pack`]) and can be
//! run through fused dequantizing kernels ([`kernels`]).

pub mod error;
pub mod params;
pub mod qlinear;
pub mod quant;
pub mod tensor;
pub mod model;
pub mod train;
pub mod data;
pub mod pretrain;
pub mod pack;
pub mod kernels;
pub mod block_ap;
pub mod e2e_qp;
pub mod config;
pub mod desk;

pub use error::{Error, Result};
