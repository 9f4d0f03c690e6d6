use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dim {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }
}
