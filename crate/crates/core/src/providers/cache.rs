use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, ProviderError};

/// One stored exchange. Layout on disk:
/// `<root>/<first two hex chars of key>/<key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub model: String,
    pub backend: String,
    pub timestamp: u64,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Content-addressed, append-only response store.
///
/// Records are never overwritten: when two writers race on a key, the first
/// completed write wins and later writes are discarded.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
    fixed_timestamp: Option<u64>,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self {
            root,
            fixed_timestamp: None,
        })
    }

    /// Stamp every new record with `ts` instead of the wall clock, so that
    /// generated caches are byte-reproducible.
    pub fn with_fixed_timestamp(mut self, ts: u64) -> Self {
        self.fixed_timestamp = Some(ts);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("__");
        self.root.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheRecord>, ProviderError> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| ProviderError::CacheIo(format!("{}: {e}", path.display())))
    }

    /// Stores a response unless the key is already present, and returns the
    /// canonical (first-written) response.
    pub fn put(
        &self,
        key: &str,
        model: &str,
        backend: &str,
        request: &ChatRequest,
        response: &ChatResponse,
    ) -> Result<ChatResponse, ProviderError> {
        let path = self.path_for(key);
        if let Some(existing) = self.get(key)? {
            return Ok(existing.response);
        }
        let dir = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let record = CacheRecord {
            key: key.to_string(),
            model: model.to_string(),
            backend: backend.to_string(),
            timestamp: self.fixed_timestamp.unwrap_or_else(now_secs),
            request: request.clone(),
            response: response.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&record)
            .map_err(|e| ProviderError::CacheIo(e.to_string()))?;
        bytes.push(b'\n');
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| io_err(&path, e))?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(response.clone()),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(self
                .get(key)?
                .map(|r| r.response)
                .unwrap_or_else(|| response.clone())),
            Err(e) => Err(io_err(&path, e.error)),
        }
    }

    /// Number of stored records.
    pub fn len(&self) -> usize {
        let Ok(shards) = std::fs::read_dir(&self.root) else {
            return 0;
        };
        shards
            .flatten()
            .filter_map(|s| std::fs::read_dir(s.path()).ok())
            .flat_map(|d| d.flatten())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_err(path: &Path, e: std::io::Error) -> ProviderError {
    ProviderError::CacheIo(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{cache_key, ChatMessage};

    #[test]
    fn first_write_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let req = ChatRequest::new(vec![ChatMessage::user("hi")], 0.0);
        let key = cache_key("m", &req);
        let first = cache
            .put(&key, "m", "test", &req, &ChatResponse::text("one"))
            .unwrap();
        let second = cache
            .put(&key, "m", "test", &req, &ChatResponse::text("two"))
            .unwrap();
        assert_eq!(first.text, "one");
        assert_eq!(second.text, "one");
        assert_eq!(cache.get(&key).unwrap().unwrap().response.text, "one");
        assert_eq!(cache.len(), 1);
        let path = cache.path_for(&key);
        assert_eq!(
            path.parent().unwrap().file_name().unwrap().to_str().unwrap(),
            &key[..2]
        );
    }

    #[test]
    fn unreadable_record_is_cache_io() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = "ab".repeat(32);
        let path = cache.path_for(&key);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(cache.get(&key), Err(ProviderError::CacheIo(_))));
    }

    #[test]
    fn concurrent_writers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let req = ChatRequest::new(vec![ChatMessage::user("race")], 0.0);
        let key = cache_key("m", &req);
        let results: Vec<String> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let cache = cache.clone();
                    let (req, key) = (req.clone(), key.clone());
                    s.spawn(move || {
                        cache
                            .put(&key, "m", "t", &req, &ChatResponse::text(format!("r{i}")))
                            .unwrap()
                            .text
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let stored = cache.get(&key).unwrap().unwrap().response.text;
        assert!(results.iter().all(|r| *r == stored));
    }
}
