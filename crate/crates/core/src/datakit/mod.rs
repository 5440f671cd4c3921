//! Dataset ingestion and synthetic identity generation.

pub mod manifest;
pub mod synth;

pub use manifest::{load_manifest, DatasetManifest, SampleRecord, SessionRecord, SubjectRecord, INDEX_FILE};
pub use synth::{generate_synthetic, SynthSpec};
