use std::fmt;

use toa_core::Error;

pub const EXIT_PROBE_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn corrupt(message: impl Into<String>) -> Self {
        Self::new(EXIT_CORRUPT, message)
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::new(1, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) | Error::Precondition(_) | Error::InvalidDropRate(_) => EXIT_USAGE,
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::Parse(_) | Error::Json(_) => EXIT_CORRUPT,
            _ => 1,
        };
        Self::new(code, err.to_string())
    }
}
