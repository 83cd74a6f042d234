use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Machine-readable error codes. The HTTP layer maps these 1:1 onto API codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Conflict,
    InvalidInput,
    NotFound,
    UnknownActionType,
    Forbidden,
    SyntaxError,
    MissingFunction,
    UnknownIdentifier,
    TypeError,
    BudgetExceeded,
    CapabilityDenied,
    RuntimeError,
    StaleVote,
    SchemaViolation,
    LastConstitutionPolicy,
    GovernanceLockout,
    NoUndoRecord,
    DependentState,
    ExecutionFailed,
    ClockRegression,
    Halted,
    StorageFailure,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Conflict => "CONFLICT",
            ErrorCode::InvalidInput => "INVALID_INPUT",
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::UnknownActionType => "UNKNOWN_ACTION_TYPE",
            ErrorCode::Forbidden => "FORBIDDEN",
            ErrorCode::SyntaxError => "SYNTAX_ERROR",
            ErrorCode::MissingFunction => "MISSING_FUNCTION",
            ErrorCode::UnknownIdentifier => "UNKNOWN_IDENTIFIER",
            ErrorCode::TypeError => "TYPE_ERROR",
            ErrorCode::BudgetExceeded => "BUDGET_EXCEEDED",
            ErrorCode::CapabilityDenied => "CAPABILITY_DENIED",
            ErrorCode::RuntimeError => "RUNTIME_ERROR",
            ErrorCode::StaleVote => "STALE_VOTE",
            ErrorCode::SchemaViolation => "SCHEMA_VIOLATION",
            ErrorCode::LastConstitutionPolicy => "LAST_CONSTITUTION_POLICY",
            ErrorCode::GovernanceLockout => "GOVERNANCE_LOCKOUT",
            ErrorCode::NoUndoRecord => "NO_UNDO_RECORD",
            ErrorCode::DependentState => "DEPENDENT_STATE",
            ErrorCode::ExecutionFailed => "EXECUTION_FAILED",
            ErrorCode::ClockRegression => "CLOCK_REGRESSION",
            ErrorCode::Halted => "HALTED",
            ErrorCode::StorageFailure => "STORAGE_FAILURE",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single field-level problem, e.g. a payload schema violation or a
/// syntax error inside a policy source field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<u32>,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
            line: None,
            column: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct GovError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub field_errors: Vec<FieldError>,
}

impl GovError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        GovError {
            code,
            message: message.into(),
            field_errors: Vec::new(),
        }
    }

    pub fn with_fields(mut self, fields: Vec<FieldError>) -> Self {
        self.field_errors = fields;
        self
    }
}

pub type Result<T, E = GovError> = core::result::Result<T, E>;

