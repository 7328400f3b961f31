//! Dataset ingestion, the synthetic fine-grained corpus, and metrics.

mod manifest;
mod metrics;
pub mod synthetic;

pub use manifest::{load_dataset, DatasetSplits, Manifest, ManifestEntry, Split, SplitTag, MANIFEST_HEADER};
pub use metrics::{per_class_accuracy, per_class_breakdown, PerClassAccuracy};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};
