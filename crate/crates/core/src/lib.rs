pub mod annotate;
pub mod backbone;
pub mod config;
pub mod decoder;
pub mod episode;
pub mod error;
pub mod gradsuite;
pub mod nn;
pub mod pixel;
pub mod policy;
pub mod prompt;
pub mod raster;
pub mod synthetic;
pub mod train;
pub mod vision;

pub use config::ModelConfig;
pub use error::{Error, Result};
