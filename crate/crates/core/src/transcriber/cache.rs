//! Append-only JSONL store of transcription results.
//!
//! Each line is one [`RunRecord`]. Later lines win over earlier ones with the
//! same key; [`Cache::compact`] rewrites the file with one line per key.
//! Lines that fail to parse are moved to `<file>.quarantine` on open.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::GenerationParams;
use crate::model::FieldSet;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot serialize cache entry: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub record_id: String,
    pub spec_hash: String,
    pub params: GenerationParams,
}

impl CacheKey {
    pub fn new(record_id: impl Into<String>, spec_hash: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            record_id: record_id.into(),
            spec_hash: spec_hash.into(),
            params,
        }
    }

    fn id(&self) -> String {
        format!(
            "{}\u{1f}{}\u{1f}{}",
            self.record_id,
            self.spec_hash,
            self.params.canonical_json()
        )
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/t={}/s={}",
            self.record_id, self.spec_hash, self.params.temperature, self.params.sample_index
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub record_id: String,
    pub spec_hash: String,
    pub params: GenerationParams,
    pub fields: FieldSet,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub raw: String,
}

impl RunRecord {
    pub fn key(&self) -> CacheKey {
        CacheKey::new(self.record_id.clone(), self.spec_hash.clone(), self.params.clone())
    }
}

pub fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Inner {
    entries: HashMap<String, RunRecord>,
    writer: BufWriter<File>,
    lines: usize,
}

pub struct Cache {
    path: PathBuf,
    inner: Mutex<Inner>,
    quarantined: Vec<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Cache {
    /// Opens (creating if needed) the store at `path`.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut entries = HashMap::new();
        let mut quarantined = Vec::new();
        let mut bad_lines = Vec::new();
        let mut lines = 0;
        if path.exists() {
            let file = File::open(path).map_err(io_err(path))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                lines += 1;
                match serde_json::from_str::<RunRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(rec.key().id(), rec);
                    }
                    Err(err) => {
                        log::warn!("{}:{}: quarantining corrupt cache entry: {err}", path.display(), n + 1);
                        quarantined.push(n + 1);
                        bad_lines.push(line);
                    }
                }
            }
        }
        let cache = Self {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner {
                entries,
                writer: BufWriter::new(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(path)
                        .map_err(io_err(path))?,
                ),
                lines,
            }),
            quarantined,
        };
        if !bad_lines.is_empty() {
            let qpath = cache.quarantine_path();
            let mut q = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&qpath)
                .map_err(io_err(&qpath))?;
            for line in &bad_lines {
                writeln!(q, "{line}").map_err(io_err(&qpath))?;
            }
            cache.compact()?;
        }
        Ok(cache)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn quarantine_path(&self) -> PathBuf {
        let mut name = self.path.as_os_str().to_owned();
        name.push(".quarantine");
        PathBuf::from(name)
    }

    /// 1-based line numbers that were quarantined when the store was opened.
    pub fn quarantined(&self) -> &[usize] {
        &self.quarantined
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, key: &CacheKey) -> Option<RunRecord> {
        self.inner.lock().unwrap().entries.get(&key.id()).cloned()
    }

    /// Appends `record`; it replaces any earlier entry with the same key.
    pub fn put(&self, record: RunRecord) -> Result<(), CacheError> {
        let line = serde_json::to_string(&record)?;
        let mut inner = self.inner.lock().unwrap();
        writeln!(inner.writer, "{line}").map_err(io_err(&self.path))?;
        inner.writer.flush().map_err(io_err(&self.path))?;
        inner.lines += 1;
        inner.entries.insert(record.key().id(), record);
        Ok(())
    }

    /// Number of superseded lines still on disk.
    pub fn stale_lines(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner.lines - inner.entries.len()
    }

    /// Rewrites the file with exactly one line per live key.
    pub fn compact(&self) -> Result<(), CacheError> {
        let mut inner = self.inner.lock().unwrap();
        inner.writer.flush().map_err(io_err(&self.path))?;
        let mut records: Vec<&RunRecord> = inner.entries.values().collect();
        records.sort_by_key(|r| r.key().id());
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
            for rec in &records {
                writeln!(out, "{}", serde_json::to_string(rec)?).map_err(io_err(&tmp))?;
            }
            out.flush().map_err(io_err(&tmp))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(io_err(&self.path))?;
        inner.lines = inner.entries.len();
        inner.writer = BufWriter::new(
            OpenOptions::new()
                .append(true)
                .open(&self.path)
                .map_err(io_err(&self.path))?,
        );
        Ok(())
    }

    /// Compacts when at least half of the lines on disk are stale.
    pub fn maybe_compact(&self) -> Result<bool, CacheError> {
        let stale = self.stale_lines();
        if stale > 0 && stale * 2 >= self.inner.lock().unwrap().lines {
            self.compact()?;
            return Ok(true);
        }
        Ok(false)
    }
}
