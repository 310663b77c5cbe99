//! Scene-location recognition over short video scenes.
//!
//! A scene is represented by a fixed number of equidistantly sampled frames.
//! Each frame is mapped to a feature vector by a backbone, a time-distributed
//! dense layer turns every frame into a class distribution, and one of six
//! aggregation heads combines the per-frame distributions into a single
//! prediction. The [`eval`] module compares heads across episode datasets
//! with the Friedman, Wilcoxon signed-rank and Holm procedures.

pub mod catalog;
pub mod error;
pub mod eval;
pub mod features;
pub mod heads;
pub mod kv;
pub mod linalg;
pub mod training;

pub use catalog::{Catalog, FramePlan, SceneRecord};
pub use error::{Error, Result};
pub use eval::{
    synthetic::{generate_synthetic, SyntheticSpec},
    ComparisonReport, EpisodeRunMatrix,
};
pub use features::{BackboneSpec, FeatureDataset, FeatureMatrix, FeatureSequence, SceneKey};
pub use heads::{HeadKind, HeadModel};
pub use training::{TrainConfig, TrainReport};
