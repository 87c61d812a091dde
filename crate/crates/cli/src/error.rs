use quantbench::eval::EvalError;
use quantbench::preprocess::PreprocessError;
use quantbench::train::TrainError;
use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Training(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::Training(_) => "training",
        }
    }

    /// One-line JSON for standard error.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        Self::Config(e.to_string())
    }

    pub fn training(e: impl std::fmt::Display) -> Self {
        Self::Training(e.to_string())
    }

    /// Writing outputs is part of the data side.
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Self::config(e),
            TrainError::EmptyDataset | TrainError::DatasetMismatch(_) => Self::data(e),
            _ => Self::training(e),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::BadFraction(_) | PreprocessError::ZeroLength => Self::config(e),
            _ => Self::data(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Preprocess(p) => p.into(),
            EvalError::TooFewModels | EvalError::EmptyGrid => Self::config(e),
            EvalError::Model(_) => Self::training(e),
            _ => Self::data(e),
        }
    }
}
