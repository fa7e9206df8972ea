use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("disconnected graph: no path from loss to parameter segment `{0}`")]
    Disconnected(String),

    #[error("graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("arity error: expected {expected} per-sample losses, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("congruence error: {0}")]
    Congruence(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("distribution error: row {row} sums to {sum}")]
    Distribution { row: usize, sum: f64 },

    #[error("degenerate epsilon {0:e}: perturbed parameters are bitwise identical")]
    DegenerateEpsilon(f64),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Config errors map to exit status 2, everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
