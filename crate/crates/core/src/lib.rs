//! Hierarchical grouping semantic segmentation at toy scale: a small
//! backbone, iterative local clustering of pixels into part-level masks,
//! query-based grouping of parts into whole-level masks, and the losses,
//! data, training and evaluation code around them.

pub mod app;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod params;
pub mod part;
pub mod train;
pub mod viz;
pub mod whole;

pub use config::{Grouping, LossWeights, ModelConfig, RunConfig, TrainConfig};
pub use error::{HgError, Result};
pub use model::{Model, ModelOutput};
pub use params::{ParamStore, Session};
