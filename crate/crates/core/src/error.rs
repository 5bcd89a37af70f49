use thiserror::Error;

pub type Result<T, E = KtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KtError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("schema error: missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("parse error at line {line}, column `{column}`: cannot read {value:?}")]
    Parse {
        line: u64,
        column: String,
        value: String,
    },

    #[error("degenerate skills with zero maximum score: {0:?}")]
    DegenerateSkill(Vec<String>),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<KtError>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl KtError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        KtError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
