use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    /// An input violates its documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Quaternion (or vector) whose norm is too small to normalize.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Two-vector rotation requested for (nearly) antipodal vectors.
    #[error("singular configuration: {0}")]
    Singular(String),

    /// A point sits on or behind the camera plane.
    #[error("point {index} cannot be projected (depth {depth:e})")]
    Projection { index: usize, depth: f64 },

    /// A 2D box with zero width or height.
    #[error("degenerate box: width {width:e}, height {height:e}")]
    DegenerateBox { width: f64, height: f64 },

    /// The object ray points away from the virtual RoI camera.
    #[error("ray is behind the virtual camera (z = {0:e})")]
    BehindVirtualCamera(f64),

    /// A value left the representable range (e.g. `exp` overflow).
    #[error("out of range: {0}")]
    Range(String),

    /// Tensor or parameter shapes disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A model or scene file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The scene sampler could not place an instance.
    #[error("generation failed: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PoseError {
    fn from(err: std::io::Error) -> Self {
        PoseError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PoseError>;
