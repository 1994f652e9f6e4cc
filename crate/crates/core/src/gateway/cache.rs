use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl CacheEntry {
    pub fn new(key: String, response: String) -> Self {
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { key, response, created_at }
    }
}

/// Content-addressed response store. On disk, each entry is one file named
/// by its hex key.
pub enum ResponseCache {
    Dir(PathBuf),
    Memory(Mutex<HashMap<String, CacheEntry>>),
    Disabled,
}

impl ResponseCache {
    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self::Dir(dir))
    }

    pub fn in_memory() -> Self {
        Self::Memory(Mutex::new(HashMap::new()))
    }

    fn entry_path(dir: &Path, key: &str) -> PathBuf {
        dir.join(key)
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        match self {
            Self::Dir(dir) => {
                let bytes = fs::read(Self::entry_path(dir, key)).ok()?;
                match serde_json::from_slice::<CacheEntry>(&bytes) {
                    Ok(e) if e.key == key => Some(e),
                    _ => {
                        log::warn!("ignoring corrupt cache entry {key}");
                        None
                    }
                }
            }
            Self::Memory(m) => m.lock().unwrap().get(key).cloned(),
            Self::Disabled => None,
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        match self {
            Self::Dir(dir) => {
                let bytes = serde_json::to_vec(entry).expect("cache entry serializes");
                fsutil::write_atomic(&Self::entry_path(dir, &entry.key), &bytes)
            }
            Self::Memory(m) => {
                m.lock().unwrap().insert(entry.key.clone(), entry.clone());
                Ok(())
            }
            Self::Disabled => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Dir(dir) => fs::read_dir(dir).map(|rd| rd.count()).unwrap_or(0),
            Self::Memory(m) => m.lock().unwrap().len(),
            Self::Disabled => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CompletionRequest, Gateway};

    #[test]
    fn disk_cache_survives_gateway_restart() {
        let dir = tempfile::tempdir().unwrap();
        let req = CompletionRequest::new("NER: fever and cough", "mock");
        let first = Gateway::new(ResponseCache::on_disk(dir.path()).unwrap())
            .register("mock", crate::gateway::MockBackend::default());
        first.complete(&req).unwrap();
        assert_eq!(first.backend_calls(), 1);

        let second = Gateway::new(ResponseCache::on_disk(dir.path()).unwrap())
            .register("mock", crate::gateway::MockBackend::default());
        assert_eq!(second.complete(&req).unwrap(), "fever, cough");
        assert_eq!(second.backend_calls(), 0);
        assert!(dir.path().join(req.cache_key()).exists());
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::on_disk(dir.path()).unwrap();
        fs::write(dir.path().join("abc"), b"{not json").unwrap();
        assert!(cache.get("abc").is_none());
        cache.put(&CacheEntry::new("abc".into(), "r".into())).unwrap();
        assert_eq!(cache.get("abc").unwrap().response, "r");
        assert_eq!(cache.len(), 1);
    }
}
