use std::fmt;

use obim_core::Error as CoreError;
use serde::Serialize;

/// An error as reported to the user: a stable machine-readable code, the
/// config field it concerns (if any) and a message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
pub struct CliError {
    pub code: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "[{}] {}: {}", self.code, field, self.message),
            None => write!(f, "[{}] {}", self.code, self.message),
        }
    }
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            field: None,
            message: message.into(),
        }
    }

    pub fn at(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    /// Field is only filled in when not already set.
    pub fn or_at(self, field: impl Into<String>) -> Self {
        if self.field.is_some() {
            self
        } else {
            self.at(field)
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::new("invalid_config", message).at(field)
    }

    /// Usage and configuration errors exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self.code {
            "invalid_config" | "config_parse" | "ratio_sum" | "unavailable_method" | "usage" => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

pub fn code_of(e: &CoreError) -> &'static str {
    use CoreError::*;
    match e {
        Io { .. } => "io",
        MalformedHeader(_) | OffsetOutOfBounds { .. } | OverlappingOffsets { .. } | OffsetGap(_) => "malformed_file",
        UnsupportedDtype { .. } => "unsupported_dtype",
        NonFinite { .. } => "non_finite",
        InvalidTensor { .. } | EmptyMap => "invalid_tensor",
        MissingTensor { .. } => "missing_tensor",
        ShapeMismatch { .. } | DimensionMismatch(_) => "shape_mismatch",
        FingerprintMismatch { .. } => "fingerprint_mismatch",
        DisjointnessViolation { .. } => "disjointness_violation",
        RatioSum { .. } => "ratio_sum",
        UnavailableMethod { .. } => "unavailable_method",
        MissingCalibration(_) | MissingHessian(_) => "missing_calibration",
        NonFiniteActivation { .. } | RankDeficient | Diverged { .. } => "numerical",
        InvalidArgument(_) => "invalid_argument",
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::new(code_of(&e), e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a config field to core errors.
pub trait Context<T> {
    fn field(self, field: impl Into<String>) -> CliResult<T>;
}

impl<T> Context<T> for std::result::Result<T, CoreError> {
    fn field(self, field: impl Into<String>) -> CliResult<T> {
        self.map_err(|e| CliError::from(e).at(field))
    }
}
