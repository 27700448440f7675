//! Error categories and their process exit codes.

use std::fmt;

use crate::config::ConfigError;

pub const OK: i32 = 0;
pub const OTHER: i32 = 1;
pub const USAGE: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const VERIFICATION: i32 = 4;

/// A missing or unreadable input, or a bad invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verifier or run-time invariant reported a violation.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// Maps an error chain to an exit code. The first recognised cause wins.
pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<VerificationFailed>() {
            return VERIFICATION;
        }
        if let Some(e) = cause.downcast_ref::<gdpo_core::Error>() {
            return match e {
                gdpo_core::Error::Numeric { .. } => NUMERIC,
                gdpo_core::Error::Config(_) | gdpo_core::Error::Format { .. } | gdpo_core::Error::Checksum { .. } => {
                    USAGE
                }
                _ => OTHER,
            };
        }
    }
    OTHER
}
