//! Manifests, audio ingestion, batching and the synthetic dataset generator.

mod dataset;
mod manifest;
mod synth;
mod wav;

pub use dataset::{epoch_order, make_batches, Batch, Dataset, Example, FeatureSource, JointDataset};
pub use manifest::{load_manifest, parse_manifest, write_manifest, ManifestEntry, Split};
pub use synth::{synth_dataset, SynthOutput, SynthSpec};
pub use wav::read_wav;
