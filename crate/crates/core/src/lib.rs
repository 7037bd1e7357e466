//! Video vision transformers built on a small reverse-mode autodiff engine.

pub mod error;
pub mod tensor;
pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod harness;
pub mod init;
pub mod models;
pub mod regularizers;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{DType, RngState, Scalar, Tape, Tensor, Var};
