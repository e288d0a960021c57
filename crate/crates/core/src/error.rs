use std::path::PathBuf;

/// Errors produced by the gt360 library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid head box: {0}")]
    InvalidBox(String),

    #[error("unusable detection: {0}")]
    DegenerateCrop(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unknown detector backend `{0}`")]
    UnknownBackend(String),

    #[error("detector backend `{backend}` failed: {message}")]
    Detector { backend: String, message: String },

    #[error("checkpoint schema mismatch for tensor `{tensor}`: {reason}")]
    Schema { tensor: String, reason: String },

    #[error("checkpoint config hash {found} does not match model config hash {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("{}: invalid manifest line(s):\n{}", path.display(), format_line_errors(.lines))]
    Manifest {
        path: PathBuf,
        lines: Vec<(usize, String)>,
    },

    #[error("training data does not match stage {stage}: {reason}")]
    StageMismatch { stage: String, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: hm={loss_hm}, io={loss_io}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss_hm: f64,
        loss_io: f64,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_line_errors(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, msg)| format!("  line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
