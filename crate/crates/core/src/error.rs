use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weight container: {0}")]
    Container(String),

    #[error("legend: {0}")]
    Legend(String),

    #[error("unknown mask color ({r},{g},{b}) at (row {row}, col {col}){}", .file.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    UnknownColor {
        r: u8,
        g: u8,
        b: u8,
        row: usize,
        col: usize,
        file: Option<PathBuf>,
    },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
