use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt packed buffer: {0}")]
    CorruptBuffer(String),

    #[error("query accumulator is empty")]
    EmptyWindow,

    #[error("invalid thresholds: tau_uint4 ({uint4}) must not exceed tau_bf16 ({bf16})")]
    InvalidThresholds { bf16: f64, uint4: f64 },

    #[error("residual buffer is empty, nothing to flush")]
    NothingToFlush,

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("no frontier point satisfies b_eff <= {max_b_eff}")]
    BudgetInfeasible { max_b_eff: f64 },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dump not found: {0}")]
    MissingDump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short kebab-case tag used in single-line CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::CorruptBuffer(_) => "corrupt-buffer",
            Error::EmptyWindow => "empty-window",
            Error::InvalidThresholds { .. } => "invalid-thresholds",
            Error::NothingToFlush => "nothing-to-flush",
            Error::Undefined(_) => "undefined",
            Error::BudgetInfeasible { .. } => "budget-infeasible",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::CorruptFile(_) => "corrupt-file",
            Error::InvalidConfig(_) => "invalid-config",
            Error::MissingDump(_) => "missing-dump",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
