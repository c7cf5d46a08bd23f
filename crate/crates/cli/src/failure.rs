use std::fmt;
use std::path::Path;

use metalwan::Error;

pub const EXIT_OK: u8 = 0;
/// Command-line usage errors (unknown flags, malformed values).
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_TOPOLOGY: u8 = 2;
pub const EXIT_GEOMETRY: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// A failed command: the exit code and the message printed on stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
    }

    pub fn parse(path: &Path, e: &serde_json::Error) -> Self {
        Failure::new(EXIT_IO, format!("{}: parse error at line {} column {}: {e}", path.display(), e.line(), e.column()))
    }

    pub fn config(message: String) -> Self {
        Failure::new(EXIT_NUMERIC, format!("invalid configuration: {message}"))
    }

    pub fn invariant(message: String) -> Self {
        Failure::new(EXIT_NUMERIC, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::TopologicalObstruction { .. } | Error::InconsistentField { .. } => EXIT_TOPOLOGY,
            Error::RegionConstruction(_)
            | Error::RegionInvalid(_)
            | Error::MeshTooCoarse { .. }
            | Error::RefineMesh { .. }
            | Error::RefineLoop { .. }
            | Error::AvoidanceFailure { .. }
            | Error::ContractionFailure(_) => EXIT_GEOMETRY,
            Error::Io(_) | Error::Parse(_) | Error::ModelDefinition(_) => EXIT_IO,
            _ => EXIT_NUMERIC,
        };
        Failure::new(code, e.to_string())
    }
}
