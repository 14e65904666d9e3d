use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch on edge {edge}: {detail}")]
    EdgeDimension { edge: usize, detail: String },

    #[error("non-finite loss {value} at step {step} ({context})")]
    NonFiniteLoss {
        context: String,
        step: usize,
        value: f64,
    },

    #[error("non-finite architecture gradient (|g_theta l| = {grad_inner:e}, |g_theta l_alpha| = {grad_outer:e}, |g_alpha l| = {grad_alpha_inner:e}, |g_alpha l_alpha| = {grad_alpha_outer:e})")]
    NonFiniteHypergradient {
        grad_inner: f64,
        grad_outer: f64,
        grad_alpha_inner: f64,
        grad_alpha_outer: f64,
    },

    #[error("image of size {height}x{width} cannot be processed: {reason}")]
    ImageSize {
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("phase `{phase}` requires {missing}")]
    MissingPrerequisite { phase: String, missing: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing input files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("plot error: {0}")]
    Plot(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
