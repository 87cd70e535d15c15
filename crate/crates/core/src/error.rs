use std::path::PathBuf;

use thiserror::Error;

use crate::regionfilter::Class;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image {width}x{height} does not fit a {size}x{size} canvas")]
    DimensionExceeded { width: u32, height: u32, size: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("failed to load model: {0}")]
    ModelLoad(String),

    #[error("cell ({i}, {j}) outside a {resolution}x{resolution} grid")]
    IndexOutOfRange { i: usize, j: usize, resolution: usize },

    #[error("empty split(s): {0}")]
    EmptySplit(String),

    #[error("class {0:?} is absent from the training set")]
    MissingClass(Class),

    #[error("level mismatch: expected P{expected}, found P{found}")]
    LevelMismatch { expected: u8, found: u8 },

    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("average precision is undefined with zero relevant items")]
    ZeroRelevant,

    #[error("unknown query id {0:?}")]
    UnknownQueryId(String),

    #[error("unknown page id {0:?}")]
    UnknownPageId(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing asset: {}", .0.display())]
    MissingAsset(PathBuf),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingAsset(_) | Error::ModelLoad(_) | Error::CorruptModel(_) => 3,
            Error::CorruptIndex(_) | Error::VersionMismatch { .. } => 4,
            _ => 1,
        }
    }
}
