//! Two-tower language models whose towers see the same input but are trained
//! through a shared head, plus the tooling to measure how each vocabulary item
//! prefers one tower over the other.

pub mod components;
pub mod corpus;
pub mod error;
pub mod preference;
pub mod substrate;
pub mod towers;
pub mod training;

pub use error::{Error, Result};
