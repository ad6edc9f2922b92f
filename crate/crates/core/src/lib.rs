//! Co-learning pipeline for benign/malignant classification of 3D chest
//! volumes: preprocessing, an attention-gated 3D CNN, gradient-boosted
//! fusion with clinical features, and ROC evaluation on synthetic phantoms.

pub mod canonical;
pub mod clinical;
pub mod dataset;
mod error;
pub mod evalmetrics;
pub mod gbdt;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod plots;
pub mod preprocess;
pub mod report;
pub mod seeds;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
