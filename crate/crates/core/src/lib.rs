pub mod cascade;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod index;
pub mod neural;
pub mod training;

pub use error::{Error, Result};
