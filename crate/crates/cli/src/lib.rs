//! Command implementations behind the `forge` and `fieldsim` binaries.
//!
//! Both entry points take their arguments and output streams explicitly so
//! they can be driven in-process as well as from the binaries.
//!
//! Exit codes: 0 success, 1 partial failure (some uploads failed),
//! 2 invalid input or server rejection, 3 server unreachable.

pub mod fieldsim;
pub mod forge;
pub mod sidecar;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use fieldforge_core::sync::SyncError;
use serde::Serialize;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_UNREACHABLE: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Unreachable(_) => EXIT_UNREACHABLE,
            CliError::Invalid(_) | CliError::Io { .. } => EXIT_INVALID,
        }
    }

    pub(crate) fn invalid(e: impl std::fmt::Display) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        match e {
            SyncError::Unreachable(m) => CliError::Unreachable(m),
            SyncError::Transport { message, .. } => CliError::Unreachable(message),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fieldforge_core::capture::write_atomic(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `value` as one line of JSON on stdout.
pub(crate) fn emit<T: Serialize>(out: &mut dyn Write, value: &T) {
    let mut line = serde_json::to_vec(value).expect("output serializes");
    line.push(b'\n');
    let _ = out.write_all(&line);
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub(crate) fn dispatch<C: Parser>(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
    run: impl FnOnce(C, &mut dyn Write, &mut dyn Write) -> Result<u8, CliError>,
) -> u8 {
    let cli = match C::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_INVALID
                }
            };
        }
    };
    match run(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
