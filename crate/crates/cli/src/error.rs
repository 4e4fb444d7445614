use std::fmt;

use lmreg::Error;

/// Failure class, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numerical,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Numerical,
            message: message.into(),
        }
    }

    /// The single JSON line printed on stderr.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "code": self.kind.code(),
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = if e.is_numerical() {
            Kind::Numerical
        } else if matches!(e, Error::Invalid(_)) {
            Kind::Config
        } else {
            Kind::Data
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

/// Tags core errors raised while reading a config file as config errors.
pub fn in_config(e: Error) -> CliError {
    let mut c = CliError::from(e);
    if c.kind == Kind::Data {
        c.kind = Kind::Config;
    }
    c
}
