//! File formats and the synthetic dataset generator.

pub mod checkpoint;
pub mod manifest;
pub mod ply;
pub mod synth;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use manifest::{read_manifest, write_jsonl, write_manifest, PairManifestEntry};
pub use ply::{read_ply, write_ply, PlyEncoding};
pub use synth::{gen_dataset, gen_pair, Preset, SynthPair, SynthSceneConfig};
