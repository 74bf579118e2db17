pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, Real, Tensor};
pub mod scan;
pub mod metrics;
pub mod optim;
pub mod data;
pub mod nn;
pub mod prior;
pub mod mamba;
pub mod fusion;
pub mod model;
pub mod checkpoint;
pub mod synth;
pub mod train;
pub mod gradsuite;
pub mod bench;
