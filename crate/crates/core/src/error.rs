use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can surface. Validation-class variants map to
/// CLI exit code 1, the rest to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {what} has dims {got:?}, expected {expected}")]
    Shape {
        op: &'static str,
        what: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("frame {frame}: label {label} out of range 0..={max}")]
    LabelRange {
        frame: usize,
        label: usize,
        max: usize,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("NaN gradient for parameter `{param}`; optimizer step refused")]
    NanGradient { param: String },

    #[error("dataset contains no sequences")]
    EmptyDataset,

    #[error("checkpoint role is {got}, expected {expected}")]
    Role { expected: String, got: String },

    #[error("dataset provenance `{got}` does not match generator config hash `{expected}`")]
    Provenance { expected: String, got: String },

    #[error("path `{input}`: {msg} (at segment {position})")]
    Path {
        input: String,
        position: usize,
        msg: String,
    },

    #[error("{what}: malformed {format} data: {msg}")]
    Format {
        format: &'static str,
        what: String,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad arguments or malformed inputs rather
    /// than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Json(_))
    }
}
