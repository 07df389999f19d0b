//! File formats, checkpoints, configuration files and the experiment harness around `stvg-core`.

pub mod checkpoint;
pub mod config_file;
pub mod corpus_io;
pub mod error;
pub mod experiments;
pub mod plot;
pub mod report;

pub use error::{Error, Result};

/// Root directory for run outputs: `$STVG_OUT`, or `runs` in the working directory.
pub fn output_root() -> std::path::PathBuf {
    std::env::var_os("STVG_OUT")
        .map(Into::into)
        .unwrap_or_else(|| "runs".into())
}
