use codealign::Error;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("missing {what} at {path}; run `{command}` first")]
    Missing { what: String, path: String, command: String },

    #[error("{what} at {path} was built from a different config (hash {found}, expected {expected}); rerun `{command}` or pass --force")]
    Stale {
        what: String,
        path: String,
        expected: String,
        found: String,
        command: String,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } | CliError::Stale { .. } => 3,
            CliError::Core(e) => match e.root() {
                Error::Config(_) | Error::Json(_) => 2,
                Error::Io { .. } | Error::Data(_) | Error::Corruption(_) => 3,
                Error::Constraint(_) | Error::IsolationViolation(_) | Error::Generation(_) => 4,
                Error::Numeric(_) | Error::Degenerate(_) | Error::Undefined(_) => 5,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Missing { .. } => "missing_artifact",
            CliError::Stale { .. } => "stale_artifact",
            CliError::Core(e) => match e.root() {
                Error::Shape(_) => "shape",
                Error::Index(_) => "index",
                Error::Config(_) | Error::Json(_) => "config",
                Error::Generation(_) => "generation",
                Error::Constraint(_) => "constraint",
                Error::Degenerate(_) => "degenerate",
                Error::Data(_) => "data",
                Error::Corruption(_) => "corruption",
                Error::Encode(_) => "encode",
                Error::IsolationViolation(_) => "isolation_violation",
                Error::Numeric(_) => "numeric",
                Error::Undefined(_) => "undefined",
                Error::Io { .. } => "io",
                Error::Stage { .. } => "stage",
            },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Missing { command, path, .. } => {
                v["command"] = json!(command);
                v["path"] = json!(path);
            }
            CliError::Stale {
                command,
                path,
                expected,
                found,
                ..
            } => {
                v["command"] = json!(command);
                v["path"] = json!(path);
                v["expected_hash"] = json!(expected);
                v["found_hash"] = json!(found);
            }
            CliError::Core(Error::Stage { stage, config_hash, .. }) => {
                v["stage"] = json!(stage);
                v["config_hash"] = json!(config_hash);
            }
            CliError::Core(_) => {}
        }
        v
    }
}
