//! Append-only JSON-lines journal of service state changes.
//!
//! Each entry is one line. On startup the whole file is replayed to rebuild
//! sessions, runs and registry mappings. A torn final line, left by a crash
//! mid-write, is ignored; damage anywhere else is an error.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wordsmith_core::prompts::{PromptDecision, PromptSession};

use crate::service::{SessionOverrides, TrainRun};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Entry {
    SessionCreated {
        session: String,
        tau: f64,
        #[serde(default)]
        overrides: SessionOverrides,
        at: u64,
    },
    /// A committed prompt decision and the session's protocol state after it.
    Decision {
        session: String,
        run: String,
        command: String,
        decision: PromptDecision,
        state: PromptSession,
    },
    /// Snapshot of a run after a stage change.
    Run {
        run: TrainRun,
    },
    CheckpointRegistered {
        prompt: String,
        id: String,
        run: String,
        session: String,
        ordinal: u64,
    },
}

pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens `path` for appending, creating it if needed, and returns the
    /// entries already in it.
    pub fn open(path: &Path) -> Result<(Self, Vec<Entry>), JournalError> {
        let entries = if path.exists() { read_entries(path)? } else { Vec::new() };
        let io = |source| JournalError::Io { path: path.into(), source };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        truncate_torn_tail(path).map_err(io)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok((Self { path: path.into(), file }, entries))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &Entry) -> Result<(), JournalError> {
        let mut line = serde_json::to_string(entry).expect("journal entries serialize");
        line.push('\n');
        let io = |source| JournalError::Io { path: self.path.clone(), source };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Parses every complete line of the journal at `path`.
pub fn read_entries(path: &Path) -> Result<Vec<Entry>, JournalError> {
    let file = File::open(path).map_err(|source| JournalError::Io { path: path.into(), source })?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).split(b'\n') {
        lines.push(line.map_err(|source| JournalError::Io { path: path.into(), source })?);
    }
    let complete = std::fs::read(path)
        .map(|b| b.last() == Some(&b'\n'))
        .map_err(|source| JournalError::Io { path: path.into(), source })?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len();
    for (i, raw) in lines.into_iter().enumerate() {
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice(&raw) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == last && !complete => {
                log::warn!("{}: ignoring torn final entry", path.display());
            }
            Err(e) => return Err(JournalError::Corrupt { path: path.into(), line: i + 1, detail: e.to_string() }),
        }
    }
    Ok(out)
}

/// Drops bytes after the last newline so new entries start on a fresh line.
fn truncate_torn_tail(path: &Path) -> std::io::Result<()> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}
