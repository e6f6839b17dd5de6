mod binio;
pub mod corpus;
pub mod dense_index;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mining;
pub mod par;
pub mod sparse;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
