//! Atomic file output.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::commands::RunOutcome;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes the report, its timings and any tables; returns the paths written.
pub fn write_outcome(dir: &Path, outcome: &RunOutcome) -> std::io::Result<Vec<PathBuf>> {
    let name = &outcome.report.command;
    let mut written = Vec::new();
    let report = dir.join(format!("{name}.json"));
    write_atomic(&report, &to_json(&outcome.report))?;
    written.push(report);
    let timings = dir.join(format!("{name}.timings.json"));
    write_atomic(&timings, &to_json(&outcome.timings))?;
    written.push(timings);
    for (file, bytes) in &outcome.tables {
        let path = dir.join(file);
        write_atomic(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}
