pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod tokenizer;
pub mod datakit;
pub mod model;
pub mod eval;
pub mod training;
pub mod experiment;
