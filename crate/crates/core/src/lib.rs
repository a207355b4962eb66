pub mod attack;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod harness;
pub mod learn;
pub mod metrics;
pub mod plot;
pub mod region;
pub mod shadow;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Tensor;
