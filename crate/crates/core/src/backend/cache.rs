use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CacheMode, CompletionRequest};

/// One line of the JSON-lines cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_id: String,
    pub request: CompletionRequest,
    pub response: String,
    pub timestamp: String,
}

/// Record/replay wrapper keyed by [`CompletionRequest::request_id`].
pub struct CachedBackend {
    mode: CacheMode,
    path: PathBuf,
    inner: Option<Arc<dyn Backend>>,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
}

impl CachedBackend {
    /// Opens (and in record mode creates) the cache at `path`. Existing
    /// entries are loaded in every mode, so a record run resumes where a
    /// previous one stopped.
    pub fn open(path: impl Into<PathBuf>, mode: CacheMode, inner: Option<Arc<dyn Backend>>) -> Result<Self, BackendError> {
        let path = path.into();
        let entries = if path.exists() {
            load_entries(&path)?
        } else {
            HashMap::new()
        };
        let writer = if mode == CacheMode::Record {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| cache_err(&path, e))?;
            }
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| cache_err(&path, e))?,
            )
        } else {
            None
        };
        let inner = match mode {
            CacheMode::ReplayStrict => None,
            CacheMode::Record | CacheMode::Replay if inner.is_none() => {
                return Err(BackendError::Config(format!("{mode:?} cache mode needs a backend")))
            }
            _ => inner,
        };
        Ok(CachedBackend {
            mode,
            path,
            inner,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn record(&self, request: &CompletionRequest, response: &str) -> Result<(), BackendError> {
        let entry = CacheEntry {
            request_id: request.request_id.clone(),
            request: request.clone(),
            response: response.to_string(),
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| cache_err(&self.path, e))?;
        line.push('\n');
        let mut guard = self.writer.lock().expect("cache writer lock");
        if let Some(file) = guard.as_mut() {
            file.write_all(line.as_bytes()).map_err(|e| cache_err(&self.path, e))?;
            file.flush().map_err(|e| cache_err(&self.path, e))?;
        }
        drop(guard);
        self.entries
            .write()
            .expect("cache lock")
            .insert(request.request_id.clone(), response.to_string());
        Ok(())
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Cache {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn load_entries(path: &Path) -> Result<HashMap<String, String>, BackendError> {
    let file = File::open(path).map_err(|e| cache_err(path, e))?;
    let mut entries = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| cache_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheEntry =
            serde_json::from_str(&line).map_err(|e| cache_err(path, format!("line {}: {e}", i + 1)))?;
        entries.insert(entry.request_id, entry.response);
    }
    Ok(entries)
}

impl Backend for CachedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if let Some(hit) = self.entries.read().expect("cache lock").get(&request.request_id) {
            return Ok(hit.clone());
        }
        let inner = match (&self.mode, &self.inner) {
            (CacheMode::ReplayStrict, _) | (_, None) => {
                return Err(BackendError::CacheMiss {
                    request_id: request.request_id.clone(),
                })
            }
            (_, Some(inner)) => inner,
        };
        let response = inner.complete(request)?;
        if self.mode == CacheMode::Record {
            self.record(request, &response)?;
        }
        Ok(response)
    }

    fn describe(&self) -> String {
        let inner = self.inner.as_ref().map(|b| b.describe()).unwrap_or_else(|| "none".into());
        format!("cache({:?}, {}, inner={inner})", self.mode, self.path.display())
    }
}
