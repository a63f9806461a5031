//! Synthetic multi-face forgery data and the perturbation suite.

pub mod dataset;
pub mod filters;
pub mod perturb;
pub mod scene;

pub use dataset::{build_split, load_split, DatasetConfig, ManifestRecord, SplitCounts};
pub use perturb::{perturb, Family, PerturbConfig};
pub use scene::{generate_sample, Scene, SceneConfig};
