pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod nn;
pub mod pipeline;
pub mod protopnet;
pub mod r3;
pub mod reward;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
