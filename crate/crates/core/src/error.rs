use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TomoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TomoError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("element {element} has non-positive conductivity {value}")]
    NonPositiveConductivity { element: usize, value: f64 },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("reference frame is identically zero; cannot normalize")]
    DegenerateReference,

    #[error("matrix is identically zero")]
    DegenerateMatrix,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("cannot access {}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("sample {id} failed")]
    Sample {
        id: u64,
        #[source]
        source: Box<TomoError>,
    },
}

impl TomoError {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Self::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::File { path, source }
    }
}
