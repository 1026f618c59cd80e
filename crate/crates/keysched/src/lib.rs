//! File formats, configuration and subcommands of the `keysched` tool,
//! built on [`keysched_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv;
pub mod error;
pub mod exec;
pub mod plot;
pub mod trace_file;

pub use config::RunConfig;
pub use error::{CliError, Result};

/// Float rendering used by the text formats; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
