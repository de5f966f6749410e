//! A from-scratch, dependency-light transformer library: attention exactly
//! as the matrix equations state it, token normalisation, pre-norm residual
//! blocks, position encodings, causal masking, autoregressive and
//! classification heads, reverse-mode autodiff with a finite-difference
//! oracle, KV-cached incremental decoding, and desk-scale Adam training.

pub mod attention;
pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
