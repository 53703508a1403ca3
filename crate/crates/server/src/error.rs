use fieldforge_core::protocol::{ErrorBody, ErrorCode};
use thiserror::Error;

/// Every server failure maps onto a wire error code.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
        }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(ErrorCode::Internal, e.to_string())
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.as_str().to_string(),
            message: self.message.clone(),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            ApiError::new(ErrorCode::QuotaExceeded, e.to_string())
        } else {
            ApiError::internal(e)
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
