use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("ill-posed coarsening map (condition number {condition:.3e})")]
    IllPosed { condition: f64 },

    #[error("forward propagation diverged at layer {layer}")]
    Divergence { layer: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: &'static str },

    #[error("invalid label {label} (expected < {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    IdxBadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated IDX file (needed {needed} bytes, found {found})")]
    IdxTruncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("corrupt model header: {0}")]
    CorruptHeader(String),

    #[error("unsupported model file version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the module that raised the error, for diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "grid",
            Error::IllPosed { .. } => "stencil",
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } => "propagation",
            Error::InvalidLabel { .. } => "propagation",
            Error::Training { .. } => "training",
            Error::EmptyDataset => "training",
            Error::InvalidArgument(_) => "core",
            Error::Io { .. }
            | Error::IdxBadMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxCountMismatch { .. }
            | Error::CorruptHeader(_)
            | Error::VersionMismatch { .. } => "data_io",
            Error::Config(_) => "cli",
        }
    }

    /// Process exit code for the error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } => 3,
            Error::IdxBadMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxCountMismatch { .. }
            | Error::CorruptHeader(_)
            | Error::VersionMismatch { .. } => 4,
            Error::Dimension(_) | Error::InvalidLabel { .. } | Error::EmptyDataset => 5,
            Error::IllPosed { .. } | Error::Divergence { .. } | Error::NonFiniteGradient { .. } => {
                6
            }
            Error::Training { source, .. } => source.exit_code(),
        }
    }
}
