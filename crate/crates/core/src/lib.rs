pub mod ablation;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod report;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autodiff::{grad_check, grad_check_many, AttentionMask, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
