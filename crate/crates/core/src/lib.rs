//! Memorization auditing for document visual question answering.

pub mod attack;
pub mod audit;
pub mod corpus;
pub mod data;
pub mod defend;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod redact;
pub mod scalar;
pub mod svg;
pub mod text;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
