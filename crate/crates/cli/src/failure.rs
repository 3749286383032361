//! Process-level failure categories and their exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Failure {
    /// Unreadable, malformed or inconsistent configuration.
    Config(String),
    /// A numerical routine failed.
    Numeric(String),
    /// The verification suite ran and at least one test failed.
    Verify(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Verify(_) => "verify",
            Failure::Config(_) => "config",
            Failure::Numeric(_) => "numeric",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Numeric(m) | Failure::Verify(m) => f.write_str(m),
        }
    }
}

impl From<delayfolio::Error> for Failure {
    fn from(e: delayfolio::Error) -> Self {
        use delayfolio::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter { .. }
            | E::MissingHistory(_)
            | E::IncompleteMarket { .. }
            | E::Constraint(_)
            | E::ZeroVolatility
            | E::OutOfRange { .. } => Failure::Config(msg),
            _ => Failure::Numeric(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numeric(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Numeric(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Numeric(format!("json: {e}"))
    }
}
