use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        AppError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Config(_) => 3,
            AppError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "usage",
            AppError::Config(_) => "config",
            AppError::Runtime(_) => "runtime",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        serde_json::to_string(&Out { error: self.kind(), code: self.exit_code(), message: self.to_string() })
            .expect("plain struct serializes")
    }
}

impl From<proca_core::Error> for AppError {
    fn from(e: proca_core::Error) -> Self {
        match e {
            proca_core::Error::Config(msg) => AppError::Config(msg),
            other => AppError::Runtime(other.to_string()),
        }
    }
}
