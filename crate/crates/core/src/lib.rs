pub mod cae;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::CaeLstm;
