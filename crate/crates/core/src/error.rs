use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint: {0}")]
    Compat(String),

    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    Training {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("sample from held-out domain `{domain}` reached a gradient step")]
    Leakage { domain: String },

    #[error("run {variant}/{domain}/seed {seed} failed: {source}")]
    Run {
        variant: String,
        domain: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("incomplete report, missing cells: {}", .0.join(", "))]
    Render(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
