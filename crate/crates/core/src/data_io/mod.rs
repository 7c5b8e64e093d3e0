//! On-disk formats and the synthetic dataset generator.

pub mod features;
pub mod manifest;
pub mod synth;

pub use features::{read_features, write_features, FeatureFileError};
pub use manifest::{load_dataset, Dataset, DatasetManifest, Video};
pub use synth::{generate_synthetic, SyntheticDataset, SyntheticSpec};
