//! Feedback files exchanged with the instrumented target through the
//! shared directory.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::model::FeedbackRecord;

pub const DEFAULT_WAIT: Duration = Duration::from_millis(2000);
const BAD_DIR: &str = "bad";

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("no feedback file for {0}")]
    Missing(String),
    #[error("malformed feedback at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut start = 0;
    for _ in 1..line {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => return bytes.len(),
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len())
}

/// Parses a feedback file. Unknown fields are ignored.
pub fn parse_feedback(bytes: &[u8]) -> Result<FeedbackRecord, FeedbackError> {
    serde_json::from_slice(bytes).map_err(|e| FeedbackError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn feedback_path(shared_dir: &Path, id: &str) -> PathBuf {
    shared_dir.join(format!("{id}.json"))
}

/// Writes `<dir>/<id>.json` through a temporary file and a rename, so
/// readers never see a partial record.
pub fn write_feedback(shared_dir: &Path, record: &FeedbackRecord) -> io::Result<PathBuf> {
    let bytes = serde_json::to_vec(record).map_err(io::Error::other)?;
    let final_path = feedback_path(shared_dir, &record.id);
    let tmp = shared_dir.join(format!("{}.json.tmp", record.id));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &final_path)?;
    Ok(final_path)
}

fn quarantine(shared_dir: &Path, path: &Path) -> io::Result<()> {
    let bad = shared_dir.join(BAD_DIR);
    fs::create_dir_all(&bad)?;
    let name = path.file_name().expect("feedback path has a file name");
    fs::rename(path, bad.join(name))
}

/// Waits up to `wait` for the feedback file of `id`, parses it and removes
/// it. Malformed files are moved to `<shared_dir>/bad/`.
pub fn collect(id: &str, shared_dir: &Path, wait: Duration) -> Result<FeedbackRecord, FeedbackError> {
    let path = feedback_path(shared_dir, id);
    let deadline = Instant::now() + wait;
    let mut pause = Duration::from_millis(1);
    let bytes = loop {
        match fs::read(&path) {
            Ok(b) => break b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let now = Instant::now();
                if now >= deadline {
                    return Err(FeedbackError::Missing(id.to_string()));
                }
                thread::sleep(pause.min(deadline - now));
                pause = (pause * 2).min(Duration::from_millis(25));
            }
            Err(e) => return Err(e.into()),
        }
    };
    match parse_feedback(&bytes) {
        Ok(record) => {
            match fs::remove_file(&path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
            Ok(record)
        }
        Err(e) => {
            quarantine(shared_dir, &path)?;
            Err(e)
        }
    }
}
