//! Line-delimited JSON helpers shared by the pool, annotation and log files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Records recovered from a log, plus the byte range dropped from its tail.
#[derive(Debug)]
pub struct LogRead<T> {
    pub records: Vec<T>,
    /// Set when the final line was truncated and moved to a quarantine file.
    pub quarantined: Option<PathBuf>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends records to a log, one line each, and syncs the file.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?);
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Reads an append-only log. A final line without a trailing newline that
/// fails to parse is treated as a torn write: it is moved to
/// `<file>.quarantine` and the log is truncated to the last good record.
/// Corruption anywhere else is an error.
pub fn read_log<T: DeserializeOwned>(path: &Path) -> Result<LogRead<T>> {
    if !path.exists() {
        return Ok(LogRead { records: Vec::new(), quarantined: None });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0usize;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end_matches('\n');
        let is_last = i + 1 == lines.len();
        if !line.trim().is_empty() {
            match serde_json::from_str(line) {
                Ok(r) => records.push(r),
                Err(e) if is_last && !raw.ends_with('\n') => {
                    let q = quarantine_path(path);
                    let mut qf = OpenOptions::new().create(true).append(true).open(&q).map_err(|e| Error::io(&q, e))?;
                    writeln!(qf, "{line}").map_err(|e| Error::io(&q, e))?;
                    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
                    f.set_len(offset as u64).map_err(|e| Error::io(path, e))?;
                    log::warn!("quarantined torn record in {}: {e}", path.display());
                    return Ok(LogRead { records, quarantined: Some(q) });
                }
                Err(e) => {
                    return Err(Error::CorruptLog { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
                }
            }
        }
        offset += raw.len();
    }
    Ok(LogRead { records, quarantined: None })
}

fn quarantine_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".quarantine");
    path.with_file_name(name)
}
