pub mod data;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preference;
pub mod rng;
pub mod study;
pub mod subset;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use rng::RandomSource;
