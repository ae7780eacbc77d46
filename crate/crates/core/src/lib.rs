pub mod artifacts;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod latent;
pub mod linalg;
pub mod localize;
pub mod mask;
pub mod palette;
pub mod pipeline;
pub mod recognize;
pub mod runtime;
pub mod segment;
pub mod text;

pub use error::{Error, Result};
