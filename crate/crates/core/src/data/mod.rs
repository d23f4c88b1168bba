//! Synthetic corpora, manifests, checkpoints and configuration files.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{sha256_hex, Checkpoint};
pub use config::{ConfigError, ExperimentConfig};
pub use manifest::{load_corpus, write_corpus, Manifest, ManifestEntry, MANIFEST_FILE, MANIFEST_HEADER};
pub use synth::{keyword_tones, speaker_f0, tone_table, Split, SynthSpec, Utterance};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{key}: {msg}")]
    InvalidSpec { key: &'static str, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("checkpoint digest mismatch")]
    Digest,
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
}
