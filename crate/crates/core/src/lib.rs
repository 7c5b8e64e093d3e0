pub mod config;
pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
