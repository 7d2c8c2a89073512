//! Driver action recognition that stays stable across camera placements.
//!
//! A small convolutional backbone produces a feature vector `f`. A view
//! classifier predicts the camera distribution `p_v`, which mixes learned
//! per-view queries into a gate `w`; the action classifier sees `f_hat = w * f`.
//! Training combines anchor cross-entropies with two opposing triplet losses over
//! (anchor, same-view, same-action) image triplets.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod probe;
pub mod sampler;
pub mod trainer;

pub use config::RunConfig;
pub use dataset::{DatasetManifest, Entry, Image, ImageStore, LabelSpace};
pub use error::{Error, Result};
pub use evaluator::{EvalReport, LabelMap, LocoReport};
pub use model::{ModelDims, ModelParams};
pub use trainer::{Checkpoint, TrainConfig};
