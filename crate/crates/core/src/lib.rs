pub mod adapters;
pub mod backbone;
pub mod crossmodal;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
