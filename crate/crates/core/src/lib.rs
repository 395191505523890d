pub mod baselines;
pub(crate) mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod influence;
pub mod model;
pub mod persist;
pub mod retrieval;
pub mod sketch;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
