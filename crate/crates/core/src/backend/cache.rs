//! Write-once, content-addressed response cache.
//!
//! Entries live at `<root>/<key[0..2]>/<key>.entry`. Each file holds a single
//! JSON metadata line followed by the verbatim provider response. Writers
//! stage into a unique temporary file and publish with `hard_link`, which
//! fails if the target already exists, so the first writer wins and readers
//! never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const QUARANTINE_DIR: &str = "quarantine";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EntryHeader {
    key: String,
    identity: String,
    /// Seconds since the Unix epoch.
    created_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub writes: usize,
    pub quarantined: usize,
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
    writes: AtomicUsize,
    quarantined: AtomicUsize,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// SHA-256 over the canonical JSON of `(identity, prompt, params)`.
///
/// `params` is re-serialized through `serde_json::Value`, whose maps are
/// key-sorted, so equal parameter sets hash equally regardless of field order.
pub fn cache_key(identity: &str, prompt: &str, params: &Value) -> String {
    let canonical = serde_json::json!({
        "identity": identity,
        "params": params,
        "prompt": prompt,
    });
    let bytes = serde_json::to_vec(&canonical).expect("json values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            writes: AtomicUsize::new(0),
            quarantined: AtomicUsize::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.root.join(shard).join(format!("{key}.entry"))
    }

    /// Returns the stored body, or `None` on a miss. Corrupt entries are
    /// moved to the quarantine directory and reported as misses.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = self.entry_path(key);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(_) => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                return None;
            }
        };
        match decode_entry(&raw, key) {
            Some(body) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(body)
            }
            None => {
                log::warn!("quarantining corrupt cache entry {}", path.display());
                self.quarantine(&path, key);
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn quarantine(&self, path: &Path, key: &str) {
        let dir = self.root.join(QUARANTINE_DIR);
        if fs::create_dir_all(&dir).is_ok() {
            let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
            let target = dir.join(format!("{key}.{}.{n}", std::process::id()));
            if fs::rename(path, target).is_ok() {
                self.quarantined.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
        let _ = fs::remove_file(path);
    }

    /// Stores `body` under `key` unless an entry already exists. Returns
    /// `true` when this call published the entry.
    pub fn put(&self, key: &str, identity: &str, body: &str) -> Result<bool> {
        let path = self.entry_path(key);
        let dir = path.parent().expect("entry path has a shard directory");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if path.exists() {
            return Ok(false);
        }

        let header = EntryHeader {
            key: key.to_string(),
            identity: identity.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, &header)?;
            f.write_all(b"\n")?;
            f.write_all(body.as_bytes())?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        let published = match fs::hard_link(&tmp, &path) {
            Ok(()) => true,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => false,
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(Error::io(&path, e));
            }
        };
        let _ = fs::remove_file(&tmp);
        if published {
            self.writes.fetch_add(1, Ordering::Relaxed);
        }
        Ok(published)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            quarantined: self.quarantined.load(Ordering::Relaxed),
        }
    }
}

fn decode_entry(raw: &[u8], key: &str) -> Option<String> {
    let text = std::str::from_utf8(raw).ok()?;
    let (header, body) = text.split_once('\n')?;
    let header: EntryHeader = serde_json::from_str(header).ok()?;
    (header.key == key).then(|| body.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache_key("id", "prompt", &json!({"temperature": 0}));
        assert_eq!(cache.get(&key), None);
        assert!(cache.put(&key, "id", "{\"raw\": [1, 2]}\nsecond line").unwrap());
        assert_eq!(cache.get(&key).as_deref(), Some("{\"raw\": [1, 2]}\nsecond line"));
        assert!(!cache.put(&key, "id", "other").unwrap());
        assert_eq!(cache.get(&key).as_deref(), Some("{\"raw\": [1, 2]}\nsecond line"));
        let s = cache.stats();
        assert_eq!((s.hits, s.misses, s.writes), (2, 1, 1));
    }

    #[test]
    fn key_ignores_param_order() {
        let a = cache_key("m", "p", &json!({"a": 1, "b": 2}));
        let b = cache_key("m", "p", &serde_json::from_str::<Value>(r#"{"b":2,"a":1}"#).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, cache_key("m2", "p", &json!({"a": 1, "b": 2})));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn corrupt_entry_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache_key("id", "p", &Value::Null);
        cache.put(&key, "id", "body").unwrap();
        fs::write(cache.entry_path(&key), b"not a header").unwrap();
        assert_eq!(cache.get(&key), None);
        assert!(!cache.entry_path(&key).exists());
        assert_eq!(cache.stats().quarantined, 1);
        assert!(cache.put(&key, "id", "fresh").unwrap());
        assert_eq!(cache.get(&key).as_deref(), Some("fresh"));
    }
}
