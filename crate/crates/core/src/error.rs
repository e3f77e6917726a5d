use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by how a caller is expected to react; see
/// [`Error::exit_code`] for the mapping used by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments or configuration supplied by the caller.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Generation could not satisfy the requested constraints.
    #[error("dataset generation failed: {0}")]
    Generation(String),

    /// A class has too few items to be split.
    #[error("cannot stratify class {class}: only {count} item(s)")]
    Stratify { class: usize, count: usize },

    /// Text containing a symbol the tokenizer does not know.
    #[error("unknown symbol {symbol:?} at byte {offset}")]
    UnknownSymbol { symbol: char, offset: usize },

    /// Array shapes that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// Loss became non-finite or a similar numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A required input file does not exist.
    #[error("missing input: {}", .0.display())]
    MissingPath(PathBuf),

    /// Failure in a named pipeline stage, with context.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Numeric(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
