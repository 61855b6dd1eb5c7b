pub mod align;
pub mod bench;
pub mod curves;
pub mod duomamba;
pub mod error;
pub mod gradcheck;
pub mod meshgen;
pub mod nn;
pub mod ssm;
pub mod store;
pub mod tokenizer;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
