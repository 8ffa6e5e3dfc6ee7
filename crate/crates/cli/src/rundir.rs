//! Append-only run directories and small file helpers.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG: &str = "config.json";
pub const REPORT: &str = "report.json";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINTS: &str = "checkpoints";

/// Creates the first unused `<root>/<prefix>-NNN`; existing runs are never
/// touched.
pub fn create_run_dir(root: &Path, prefix: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(CliError::io(root))?;
    for n in 1.. {
        let dir = root.join(format!("{prefix}-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io { path: dir, source: e }),
        }
    }
    unreachable!()
}

/// New run directory holding the config snapshot.
pub fn start_run(root: &Path, prefix: &str, config: &RunConfig) -> Result<PathBuf> {
    let dir = create_run_dir(root, prefix)?;
    config.write(&dir.join(CONFIG))?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(CliError::io(path))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_fresh() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), "train").unwrap();
        let b = create_run_dir(root.path(), "train").unwrap();
        assert_ne!(a, b);
        assert!(a.ends_with("train-001") && b.ends_with("train-002"));
    }
}
