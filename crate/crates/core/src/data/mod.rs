//! Ground-truth data: synthetic clusters, the frozen feature map,
//! feature-space augmentation and feature-file ingestion.

mod augment;
mod backbone;
mod dataset;
mod feature_file;
mod synthetic;

pub use augment::{AugmentConfig, Augmenter};
pub use backbone::{BackboneConfig, FeatureBackbone, PretrainReport};
pub use dataset::{DatasetSplit, Instance};
pub use feature_file::{
    export_feature_file, feature_text, ingest_feature_file, parse_feature_text,
};
pub use synthetic::{make_synthetic_dataset, SyntheticConfig, DEFAULT_SPREAD};
