pub mod ablation;
pub mod action_expert;
pub mod backbone;
pub mod bundle;
pub mod env;
pub mod error;
pub mod harness;
pub mod memory;
pub mod nn;
pub mod policy;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
