//! Context-attentive session search: document ranking and next-query
//! suggestion driven by the queries and clicks earlier in a search task.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod ranker;
pub mod train;
pub mod session;
pub mod vocab;

pub use error::{Error, Result};
