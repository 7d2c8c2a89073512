use serde::Serialize;

use dbmnet::Error;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const IO: u8 = 5;

/// A failed command: exit code plus the machine-readable line printed on stderr.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub code: u8,
    pub error: String,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, error: &str, message: impl Into<String>) -> Self {
        Self {
            code,
            error: error.to_owned(),
            message: message.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("failure serializes")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => CONFIG,
            Error::Diverged { .. } => NUMERIC,
            Error::NotFound(_) | Error::Io(_) | Error::Checksum(_) | Error::Version { .. } => IO,
            Error::MalformedLayout(_)
            | Error::EmptyFold { .. }
            | Error::Shape(_)
            | Error::Label { .. }
            | Error::Unsampleable(_)
            | Error::EmptyEval
            | Error::LabelSpace(_)
            | Error::LabelMap(_)
            | Error::EmptyClass(_)
            | Error::Image(_)
            | Error::Json(_) => DATA,
        };
        Self::new(code, e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}
