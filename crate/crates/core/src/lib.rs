//! Controllable-generation preference alignment with parameter-efficient
//! control tokens, on a small byte-level transformer.

pub mod adapters;
pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
