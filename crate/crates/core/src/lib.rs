mod binio;
pub mod channel;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
