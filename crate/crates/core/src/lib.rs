pub mod error;
pub mod eval;
pub mod grid;
pub mod keyframes;
pub mod model;
pub mod series;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
