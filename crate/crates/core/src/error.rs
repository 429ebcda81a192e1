use std::path::PathBuf;

/// Every failure the library reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: norm is zero or not finite")]
    DegenerateVector,
    #[error("ambiguous geodesic: endpoints are antipodal (1 + cos = {0:e})")]
    AmbiguousPath(f64),
    #[error("anonymity violation: alpha {alpha} rad must exceed theta {theta} rad")]
    AnonymityViolation { alpha: f64, theta: f64 },
    #[error("empty sweep: {0}")]
    EmptySweep(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("model not loaded")]
    ModelNotLoaded,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    FatalDivergence { step: usize, detail: String },
    #[error("no face found in frame {0}")]
    NoFace(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),
}

impl Error {
    /// Stable machine-readable category, used on the CLI and in HTTP bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateVector => "degenerate_vector",
            Error::AmbiguousPath(_) => "ambiguous_path",
            Error::AnonymityViolation { .. } => "anonymity_violation",
            Error::EmptySweep(_) => "empty_sweep",
            Error::Shape(_) => "shape_error",
            Error::Config(_) => "config_error",
            Error::AdapterUnavailable(_) => "adapter_unavailable",
            Error::ModelNotLoaded => "model_not_loaded",
            Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Error::FatalDivergence { .. } => "fatal_divergence",
            Error::NoFace(_) => "no_face",
            Error::Invalid(_) => "invalid_input",
            Error::MissingFile(_) => "missing_file",
            Error::Io(_) => "io_error",
            Error::Image(_) => "image_error",
            Error::Json(_) => "json_error",
            Error::Torch(_) => "torch_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
