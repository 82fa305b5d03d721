use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, Completion, CompletionRequest};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    request: CompletionRequest,
    completion: Completion,
    timestamp: u64,
}

#[derive(Clone)]
enum Entry {
    Stored(Completion),
    Corrupt(String),
}

/// Reads an append-only cache file into a key index. Later lines win.
fn load_index(path: &Path) -> Result<HashMap<String, Entry>> {
    let mut index = HashMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(index),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt_line = |reason: String| Error::CorruptCacheLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| corrupt_line(e.to_string()))?;
        let key = value
            .get("key")
            .and_then(Value::as_str)
            .ok_or_else(|| corrupt_line("no `key` field".into()))?
            .to_string();
        let entry = match serde_json::from_value::<CacheLine>(value) {
            Ok(l) => Entry::Stored(l.completion),
            Err(e) => Entry::Corrupt(e.to_string()),
        };
        index.insert(key, entry);
    }
    Ok(index)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub fetches: u64,
}

/// Persistent response cache keyed by [`CompletionRequest::key`].
///
/// Without an upstream backend the cache is a pure replayer: every miss is
/// an error.
pub struct ResponseCache {
    path: Option<PathBuf>,
    index: Mutex<HashMap<String, Entry>>,
    writer: Mutex<Option<File>>,
    upstream: Option<Arc<dyn Backend>>,
    hits: AtomicU64,
    fetches: AtomicU64,
}

impl ResponseCache {
    pub fn open(path: &Path, upstream: Option<Arc<dyn Backend>>) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let index = load_index(path)?;
        let writer = match upstream {
            Some(_) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            ),
            None => None,
        };
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            index: Mutex::new(index),
            writer: Mutex::new(writer),
            upstream,
            hits: AtomicU64::new(0),
            fetches: AtomicU64::new(0),
        })
    }

    /// A cache that lives only as long as the process.
    pub fn in_memory(upstream: Arc<dyn Backend>) -> Self {
        ResponseCache {
            path: None,
            index: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
            upstream: Some(upstream),
            hits: AtomicU64::new(0),
            fetches: AtomicU64::new(0),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            fetches: self.fetches.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &str) -> bool {
        matches!(self.index.lock().unwrap().get(key), Some(Entry::Stored(_)))
    }

    /// Returns the stored completion for `req`, fetching and storing it on a miss.
    pub fn get_or_fetch(&self, req: &CompletionRequest) -> Result<Completion> {
        let key = req.key();
        match self.index.lock().unwrap().get(&key) {
            Some(Entry::Stored(c)) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(c.clone());
            }
            Some(Entry::Corrupt(reason)) => {
                return Err(Error::CorruptCacheEntry {
                    key,
                    reason: reason.clone(),
                })
            }
            None => {}
        }
        let upstream = self
            .upstream
            .as_ref()
            .ok_or_else(|| Error::CacheMiss { key: key.clone() })?;
        let completion = upstream.complete(req)?;
        self.fetches.fetch_add(1, Ordering::Relaxed);
        self.store(key, req, &completion)?;
        Ok(completion)
    }

    fn store(&self, key: String, req: &CompletionRequest, completion: &Completion) -> Result<()> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(f) = writer.as_mut() {
            let timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let line = CacheLine {
                key: key.clone(),
                request: req.clone(),
                completion: completion.clone(),
                timestamp,
            };
            let mut buf = serde_json::to_vec(&line)?;
            buf.push(b'\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            f.write_all(&buf).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        self.index
            .lock()
            .unwrap()
            .insert(key, Entry::Stored(completion.clone()));
        Ok(())
    }
}

impl Backend for ResponseCache {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion> {
        self.get_or_fetch(req)
    }
}

/// Serves completions recorded by an earlier run.
pub struct ReplayBackend {
    recorded: HashMap<String, Completion>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = (String, Completion)>) -> Self {
        ReplayBackend {
            recorded: records.into_iter().collect(),
        }
    }

    /// Loads a cache file; corrupted entries are reported, not skipped.
    pub fn from_cache_file(path: &Path) -> Result<Self> {
        let mut recorded = HashMap::new();
        for (key, entry) in load_index(path)? {
            match entry {
                Entry::Stored(c) => {
                    recorded.insert(key, c);
                }
                Entry::Corrupt(reason) => return Err(Error::CorruptCacheEntry { key, reason }),
            }
        }
        Ok(ReplayBackend { recorded })
    }

    pub fn len(&self) -> usize {
        self.recorded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recorded.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion> {
        let key = req.key();
        self.recorded
            .get(&key)
            .cloned()
            .ok_or(Error::CacheMiss { key })
    }
}
