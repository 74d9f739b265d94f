use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate bounding box: {0}")]
    DegenerateBox(String),

    #[error("class label {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The risk-control level is below what `n` samples can certify.
    #[error("infeasible risk level: alpha = {alpha} < B/(n+1) = {bound}")]
    InfeasibleAlpha { alpha: f64, bound: f64 },

    /// Precondition `alpha_task >= alpha_cnf + B/(n+1)` does not hold.
    #[error("precondition violated: alpha_{task} = {alpha_task} < alpha_cnf + 1/(n+1) = {alpha_cnf} + {correction} (n = {n})")]
    Precondition {
        task: &'static str,
        alpha_task: f64,
        alpha_cnf: f64,
        correction: f64,
        n: usize,
    },

    #[error("no feasible {task} parameter in [{lower}, {upper}] for alpha_{task} = {alpha}")]
    Step2Infeasible {
        task: &'static str,
        alpha: f64,
        lower: f64,
        upper: f64,
    },

    #[error("empty calibration set")]
    EmptyCalibrationSet,

    #[error("empty test set")]
    EmptyTestSet,

    #[error("schema violation in image {image_id:?}, {record}: {message}")]
    Schema {
        image_id: String,
        record: String,
        message: String,
    },

    #[error("unknown category id {category_id} in detection {index}")]
    UnknownCategory { category_id: i64, index: usize },

    #[error("config digest mismatch: result was produced with {expected}, supplied config hashes to {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}
