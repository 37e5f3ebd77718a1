use std::fmt;
use std::path::Path;

/// Error categories, each with its own process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// A self-check found values out of tolerance.
    Check,
    Config,
    MissingPrerequisite,
    Divergence,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Check => 1,
            Self::Config => 2,
            Self::MissingPrerequisite => 3,
            Self::Divergence => 4,
            Self::Io => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Check => "check_failed",
            Self::Config => "config",
            Self::MissingPrerequisite => "missing_prerequisite",
            Self::Divergence => "divergence",
            Self::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(Kind::Io, format!("{}: {err}", path.display()))
    }

    /// The single stderr line reported on failure.
    pub fn line(&self) -> String {
        format!("error kind={} code={} message={:?}", self.kind.name(), self.kind.exit_code(), self.message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<diat_core::Error> for CliError {
    fn from(e: diat_core::Error) -> Self {
        let kind = match e {
            diat_core::Error::NonFinite { .. } => Kind::Divergence,
            diat_core::Error::Io(_) => Kind::Io,
            _ => Kind::Config,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<diat_data::Error> for CliError {
    fn from(e: diat_data::Error) -> Self {
        let kind = match e {
            diat_data::Error::Core(inner) => return inner.into(),
            diat_data::Error::InvalidArgument(_) => Kind::Config,
            diat_data::Error::Io { .. } | diat_data::Error::Format(_) | diat_data::Error::Manifest { .. } => Kind::Io,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<diat_pipeline::Error> for CliError {
    fn from(e: diat_pipeline::Error) -> Self {
        use diat_pipeline::Error as E;
        let kind = match e {
            E::Core(inner) => return inner.into(),
            E::Data(inner) => return inner.into(),
            E::Config(_) | E::PhaseOrder(_) => Kind::Config,
            E::MissingPrerequisite(_) => Kind::MissingPrerequisite,
            E::Divergence { .. } => Kind::Divergence,
            E::Io { .. } => Kind::Io,
        };
        Self::new(kind, e.to_string())
    }
}
