use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("ply header: {0}")]
    PlyHeader(String),

    #[error("ply properties: {0}")]
    PlyProperties(String),

    #[error("ply truncated: expected {expected} bytes of vertex data, found {found}")]
    PlyTruncated { expected: usize, found: usize },

    #[error("ply body: {0}")]
    PlyBody(String),

    #[error("initialization: {0}")]
    Init(String),

    #[error("missing image for view `{id}`: {path}")]
    MissingImage { id: String, path: PathBuf },

    #[error("image `{id}` is {actual_w}x{actual_h} but its camera declares {expected_w}x{expected_h}")]
    ImageDimensions {
        id: String,
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("duplicate view id `{0}`")]
    DuplicateId(String),

    #[error("unknown view id `{0}`")]
    UnknownId(String),

    #[error("scene manifest: {0}")]
    Manifest(String),

    #[error("non-finite loss at iteration {iter}: {term} = {value}")]
    NonFiniteLoss { iter: usize, term: &'static str, value: f64 },

    #[error("pfm: {0}")]
    Pfm(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable class name, used by the CLI for its one-line errors.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::PlyHeader(_) | Error::PlyProperties(_) | Error::PlyTruncated { .. } | Error::PlyBody(_) => "ply",
            Error::Init(_) => "init",
            Error::MissingImage { .. } => "missing-image",
            Error::ImageDimensions { .. } => "image-dimensions",
            Error::DuplicateId(_) => "duplicate-id",
            Error::UnknownId(_) => "unknown-id",
            Error::Manifest(_) => "manifest",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Pfm(_) => "pfm",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Codec(_) => "codec",
        }
    }
}
