pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss_metrics;
pub mod model;
pub mod nn;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
