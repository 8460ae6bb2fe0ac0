//! Library surface of the `sta` command-line tool: the STSD container,
//! configuration resolution and the subcommand implementations. The binary in
//! `main.rs` is a thin argument-parsing wrapper so that integration tests can
//! drive the same code paths directly.

pub mod commands;
pub mod config;
pub mod stsd;

use thiserror::Error;

/// Process-level failure classes; `code` maps them onto exit codes
/// (1 usage, 2 numerical failure, 3 I/O).
#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io { .. } | CliError::Format(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<sta_core::uot::UotError> for CliError {
    fn from(e: sta_core::uot::UotError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<sta_core::barycenter::BarycenterError> for CliError {
    fn from(e: sta_core::barycenter::BarycenterError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<sta_core::forecast::ForecastError> for CliError {
    fn from(e: sta_core::forecast::ForecastError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<sta_core::align::AlignError> for CliError {
    fn from(e: sta_core::align::AlignError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<sta_core::delannoy::DelannoyError> for CliError {
    fn from(e: sta_core::delannoy::DelannoyError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<sta_core::geometry::GeometryError> for CliError {
    fn from(e: sta_core::geometry::GeometryError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<sta_core::measure::MeasureError> for CliError {
    fn from(e: sta_core::measure::MeasureError) -> Self {
        CliError::Format(e.to_string())
    }
}
