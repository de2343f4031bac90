pub mod data;
pub mod knn;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod trainer;
pub mod tur;

pub use error::{Error, Result};
