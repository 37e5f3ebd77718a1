//! Synthetic face data: a procedural renderer with per-attribute masks, a
//! PPM codec, dataset manifests and guided/input splits.

pub mod attributes;
pub mod dataset;
pub mod error;
pub mod ppm;
pub mod render;

pub use attributes::{Attribute, Attributes, Marginals, Target};
pub use dataset::{
    generate_dataset, identity_split, render_sample, split_guided_and_input, Dataset, DatasetManifest,
    GeneratorConfig, ManifestEntry, Split, SyntheticFaceSample, DEFAULT_IDENTITIES, DEFAULT_INPUT_LIMIT,
};
pub use error::{Error, Result};
pub use render::{FaceParams, IdentityParams, Nuisance, SUPPORTED_SIZES};
