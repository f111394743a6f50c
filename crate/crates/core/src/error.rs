use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN or infinity produced or supplied.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Invalid hyperparameter or configuration combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse that the type system cannot rule out (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Finite-difference audit could not run (e.g. non-deterministic function).
    #[error("gradient audit error: {0}")]
    Audit(String),

    /// Malformed binary or text payload.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("class id {id} out of range for {classes} classes")]
    ClassRange { id: usize, classes: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {detail}")]
    Image { path: String, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by numerics rather than usage or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Audit(_))
    }
}
