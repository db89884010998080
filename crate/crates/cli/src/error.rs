use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{pointer}`: {message}")]
    Config { pointer: String, message: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn config(pointer: &str, message: impl Into<String>) -> Self {
        CliError::Config { pointer: pointer.to_string(), message: message.into() }
    }

    #[cfg(test)]
    pub fn pointer(&self) -> Option<&str> {
        match self {
            CliError::Config { pointer, .. } => Some(pointer),
            CliError::Numeric(_) => None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config { pointer, message } => {
                json!({"error": {"kind": "config", "pointer": pointer, "message": message}})
            }
            CliError::Numeric(message) => json!({"error": {"kind": "numeric", "message": message}}),
        }
    }
}

impl From<codim2::Error> for CliError {
    fn from(e: codim2::Error) -> Self {
        use codim2::Error as E;
        match e {
            E::Config(_) | E::Parse(_) | E::InvalidRegularization(_) | E::Contract(_) => {
                CliError::config("", e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}
