//! Library side of the `segdiff` binary: run configs, subcommand bodies,
//! SVG rendering and exit-code mapping.

pub mod commands;
pub mod config;
pub mod render;

use segdiff_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Dimension(_) | Error::Contract(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
        Error::Numeric(_) | Error::Training { .. } => EXIT_NUMERIC,
    }
}
