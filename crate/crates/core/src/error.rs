use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfptError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid assignment: {0}")]
    Assignment(String),

    #[error("matching infeasible: {rows} rows but only {cols} columns")]
    Infeasible { rows: usize, cols: usize },

    #[error("brute-force search has {candidates} candidates, above the limit of {limit}")]
    TooLarge { candidates: u128, limit: u128 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("degenerate mixture component: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<PfptError>,
    },
}

pub type Result<T> = std::result::Result<T, PfptError>;
