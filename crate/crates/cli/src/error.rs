use std::fmt::Display;

use serde::Serialize;

/// Process exit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// A checked property or tolerance was violated.
    PropertyFailure,
    /// Missing, unreadable or invalid input.
    BadInput,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::PropertyFailure => 1,
            ErrorKind::BadInput => 2,
            ErrorKind::Internal => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ErrorKind,
    pub reason: String,
}

impl CliError {
    pub fn property(reason: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::PropertyFailure,
            reason: reason.into(),
        }
    }

    /// One JSON object on a single line.
    pub fn to_line(&self, command: &str) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            status: &'static str,
            kind: ErrorKind,
            exit_code: u8,
            command: &'a str,
            reason: String,
        }
        let reason = self.reason.split_whitespace().collect::<Vec<_>>().join(" ");
        serde_json::to_string(&Line {
            status: "error",
            kind: self.kind,
            exit_code: self.kind.exit_code(),
            command,
            reason,
        })
        .expect("plain struct serialises")
    }
}

/// Wraps an error with a context prefix under a given class.
pub fn bad_input<E: Display>(context: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError {
        kind: ErrorKind::BadInput,
        reason: format!("{context}: {e}"),
    }
}

pub fn internal<E: Display>(context: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError {
        kind: ErrorKind::Internal,
        reason: format!("{context}: {e}"),
    }
}

pub fn invalid(reason: impl Into<String>) -> CliError {
    CliError {
        kind: ErrorKind::BadInput,
        reason: reason.into(),
    }
}
