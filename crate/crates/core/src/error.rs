use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NacError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate signature at row {row}: norm {norm:e} is below 1e-12")]
    DegenerateSignature { row: usize, norm: f64 },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NacError>;

pub(crate) fn contract(msg: impl Into<String>) -> NacError {
    NacError::Contract(msg.into())
}
