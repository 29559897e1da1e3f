pub mod baselines;
pub mod cfqp;
pub mod clustering;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod odesim;
pub mod oracle;

pub use error::{Error, Result};
pub use matrix::Matrix;
