pub mod error;
pub mod haar_space;
pub mod image;
pub mod nn;
pub mod train;
pub mod compressed;
pub mod windows;
pub mod detect;
pub mod synth;
pub mod pipeline;

pub use error::{Error, Result};
