//! Experiment harness for the queue-lottery library: configuration,
//! commands and the readers/writers of their result files.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "QUEUE_LOTTERY_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// `--out`, else the config's `output_dir`, else `$QUEUE_LOTTERY_OUT/<command>`,
/// else `runs/<command>`.
pub fn output_dir(flag: Option<&Path>, configured: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = configured {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

/// Maps a command result to the process exit code.
pub fn exit_code(result: &anyhow::Result<commands::Outcome>) -> i32 {
    match result {
        Ok(o) if o.converged => EXIT_OK,
        Ok(_) => EXIT_NOT_CONVERGED,
        Err(e) if e.downcast_ref::<config::ConfigError>().is_some() => EXIT_CONFIG,
        Err(_) => EXIT_INTERNAL,
    }
}
