pub mod dataio;
pub mod diffcore;
pub mod diffusion;
pub mod egnn;
pub mod embeddings;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod training;
pub mod virtual_receptor;

pub use error::{Error, Result};
