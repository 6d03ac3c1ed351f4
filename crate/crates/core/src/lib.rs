//! Grayscale multi-view radiance fields colorized by distilling Lab chroma
//! from per-view teacher images.

pub mod color;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod field;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod scenegen;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
