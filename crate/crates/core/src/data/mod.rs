//! Datasets: samples, guarded manifests, file formats, batching and the
//! synthetic compound-domain benchmark.

mod batch;
mod image_io;
mod manifest;
pub mod pack;
mod sample;
pub mod synth;

pub use batch::{iterate_batches, BatchIterator};
pub use image_io::{read_png, write_png};
pub use manifest::{load_manifest, write_manifest, EvaluationLabels, ManifestRole, SampleManifest, SealedEntry, Sidecar};
pub use sample::{DataShape, Label, Sample, Split};
pub use synth::{generate_synthetic, write_synthetic, SynthSummary, SyntheticSpec, TransformSpec};
