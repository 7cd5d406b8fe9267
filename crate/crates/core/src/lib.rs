pub mod baselines;
pub mod codec;
pub mod error;
pub mod eval;
pub mod filters;
pub mod sampler;
pub mod vm;
pub mod ssm;

pub use error::{Error, Result};
