use std::fmt;

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

/// A failed run: exit code plus a machine-readable reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: u8,
    pub reason: String,
    pub message: String,
}

impl Failure {
    pub fn validation(reason: &str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            reason: reason.to_string(),
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CHECK,
            reason: "check_failed".to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.reason, self.message)
    }
}

impl From<htransform::Error> for Failure {
    fn from(e: htransform::Error) -> Self {
        let code = match e {
            htransform::Error::NotConverged { .. } => EXIT_CHECK,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            reason: e.reason().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            reason: "io_error".to_string(),
            message: e.to_string(),
        }
    }
}
