use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("tensors are not in the canonical rank-one family: {0}")]
    NotCanonical(String),

    #[error("state too large for dense expansion: {qubits} qubits (limit {limit})")]
    SizeGuard { qubits: usize, limit: usize },

    #[error("coupling is not unitary")]
    NonUnitaryCoupling,

    #[error("invalid web: {0}")]
    InvalidWeb(String),

    #[error("measurement is not complete: max deviation {0:e}")]
    Incomplete(f64),

    #[error("site ({wire}, {column}) is not measurable: {reason}")]
    SiteUnavailable { wire: usize, column: usize, reason: String },

    #[error("retained-site capacity exceeded on wire {0}")]
    RetainedCapacity(usize),

    #[error("coupling order violated: {0}")]
    CouplingOrder(String),

    #[error("forced outcome {outcome} has probability {probability:e}")]
    ZeroProbability { outcome: usize, probability: f64 },

    #[error("site ({wire}, {column}) does not factor out: weight {weight}")]
    NotFactorized { wire: usize, column: usize, weight: f64 },

    #[error("wire {0} exhausted")]
    WireExhausted(usize),

    #[error("wrong protocol: {0}")]
    WrongProtocol(String),

    #[error("unsupported wire family: {0}")]
    UnsupportedFamily(String),

    #[error("compilation budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("repeat-until-success budget exhausted after {0} trials")]
    RusExhausted(usize),

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("localization did not succeed")]
    NotSucceeded,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
