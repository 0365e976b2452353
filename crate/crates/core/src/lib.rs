pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dhln;
pub mod error;
pub mod fptn;
pub mod heatmap;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use config::ShtConfig;
pub use error::{Result, ShtError};
