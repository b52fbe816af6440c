//! Crate error type.
//!
//! Contract violations (bad indices, mismatched dimensions, stepping a done
//! environment) panic via `assert!`; everything that can legitimately fail at
//! runtime surfaces here.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point landed at or behind the camera plane during projection.
    #[error("point {index} is at or behind the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    /// An operation that requires set pixels got an empty mask.
    #[error("mask is empty")]
    EmptyMask,

    /// Mesh construction or OBJ parsing failed.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// OBJ/config style line-oriented parse failure.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Scene could not produce a usable initial state.
    #[error("scene setup failed: {0}")]
    SceneSetup(String),

    /// Parameter/checkpoint blob is malformed.
    #[error("parameter file error at byte {offset}: {msg}")]
    ParamParse { offset: usize, msg: String },

    /// Parameter/checkpoint blob has an unsupported version.
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Sampling from an empty replay buffer.
    #[error("replay buffer is empty")]
    EmptyReplay,

    /// A loss component became non-finite during an update.
    #[error("non-finite loss in component `{component}` (value {value})")]
    NonFiniteLoss { component: &'static str, value: f64 },

    /// Configuration validation failure (possibly several keys at once).
    #[error("invalid config: {0}")]
    Config(String),

    /// I/O failure annotated with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
