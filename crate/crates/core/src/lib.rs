pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod assets;
pub mod cli;
pub mod depth;
pub mod features;
pub mod gaussians;
pub mod geometry;
pub mod pipeline;
pub mod render;
pub mod texture;
pub mod training;
