pub mod backbone;
pub mod binio;
pub mod body_model;
pub mod error;
pub mod harness;
pub mod joints;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod pose2d;
pub mod posenet;
pub mod scene;
pub mod shapenet;

pub use error::{Error, Result};
