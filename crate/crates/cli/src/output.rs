//! Report files. Everything goes through a temporary file in the target
//! directory that is renamed into place, so a failed run never leaves a
//! half-written report behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::args::Format;
use crate::{CliError, CliResult};

fn write_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Write { path: path.to_path_buf(), source }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))
}

/// Write `bytes` to `dir/name` atomically.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    with_temp(dir, &path, |tmp| tmp.write_all(bytes).and_then(|_| tmp.flush()).map_err(|e| write_err(&path, e)))?;
    Ok(path)
}

/// Let `fill` produce the file at a temporary path, then move it into place.
pub fn with_temp(dir: &Path, dest: &Path, fill: impl FnOnce(&mut NamedTempFile) -> CliResult<()>) -> CliResult<()> {
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| write_err(dest, e))?;
    fill(&mut tmp)?;
    tmp.persist(dest).map_err(|e| write_err(dest, e.error))?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T], header: Option<&[&str]>) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Usage(format!("cannot format report: {e}"))
}

/// Rows as `stem.csv`, or as a JSON array in `stem.json`.
pub fn emit<T: Serialize>(dir: &Path, stem: &str, rows: &[T], format: Format) -> CliResult<PathBuf> {
    match format {
        Format::Csv => write_atomic(dir, &format!("{stem}.csv"), &csv_bytes(rows, None)?),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows).map_err(|e| CliError::Usage(e.to_string()))?;
            s.push('\n');
            write_atomic(dir, &format!("{stem}.json"), s.as_bytes())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        h: i64,
        estimate: f64,
    }

    #[test]
    fn csv_and_json_round() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [Row { h: -1, estimate: 0.5 }, Row { h: 0, estimate: 0.25 }];
        let p = emit(dir.path(), "x", &rows, Format::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "h,estimate\n-1,0.5\n0,0.25\n");
        let p = emit(dir.path(), "x", &rows, Format::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v[1]["estimate"], 0.25);
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 2);
    }
}
