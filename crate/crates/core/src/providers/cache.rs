use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;

use super::{normalize_upstream, ChatProvider, Encoder, ProviderError, ProviderKind};

/// SHA-256 hex digest of `(namespace, payload)`.
pub fn digest(namespace: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    h.update(namespace.as_bytes());
    h.update([0u8]);
    h.update(payload.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    digest: String,
    response: String,
}

/// Digest-keyed response store, optionally backed by an append-only JSONL
/// file of `{digest, response}` lines.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<BufWriter<File>>>,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for ResponseCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResponseCache")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    /// Opens (or creates) a cache file and loads its entries. A torn final
    /// line from an interrupted write is skipped.
    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        let err = |e: std::io::Error| ProviderError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(err)?);
            for line in reader.lines() {
                let line = line.map_err(err)?;
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.digest, l.response);
                    }
                    Err(_) if line.trim().is_empty() => {}
                    Err(e) => log::warn!("{}: skipping unreadable cache line: {e}", path.display()),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
            in_flight: Mutex::new(HashMap::new()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<String> {
        self.entries.read().expect("cache lock").get(digest).cloned()
    }

    pub fn insert(&self, digest: &str, response: &str) -> Result<(), ProviderError> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                digest: digest.to_string(),
                response: response.to_string(),
            })
            .map_err(|e| ProviderError::Cache(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| ProviderError::Cache(e.to_string()))?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(digest.to_string(), response.to_string());
        Ok(())
    }

    /// Returns the cached value or computes and stores it. Concurrent callers
    /// with the same digest wait for the first one, so the computation runs
    /// once per digest. The flag is true on a cache hit.
    pub fn get_or_try_insert_with<F>(&self, digest: &str, compute: F) -> Result<(String, bool), ProviderError>
    where
        F: FnOnce() -> Result<String, ProviderError>,
    {
        if let Some(v) = self.get(digest) {
            return Ok((v, true));
        }
        let slot = {
            let mut map = self.in_flight.lock().expect("in-flight lock");
            Arc::clone(map.entry(digest.to_string()).or_default())
        };
        let _guard = slot.lock().expect("key lock");
        if let Some(v) = self.get(digest) {
            return Ok((v, true));
        }
        let result = compute().and_then(|v| self.insert(digest, &v).map(|_| v));
        self.in_flight.lock().expect("in-flight lock").remove(digest);
        result.map(|v| (v, false))
    }
}

/// Chat provider behind a [`ResponseCache`].
pub struct CachedChat {
    inner: Arc<dyn ChatProvider>,
    cache: Arc<ResponseCache>,
    upstream_calls: AtomicUsize,
}

impl CachedChat {
    pub fn new(inner: Arc<dyn ChatProvider>, cache: Arc<ResponseCache>) -> Self {
        CachedChat {
            inner,
            cache,
            upstream_calls: AtomicUsize::new(0),
        }
    }

    /// Requests that reached the wrapped provider.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for CachedChat {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let key = digest(&format!("chat:{}", self.inner.name()), prompt);
        self.cache
            .get_or_try_insert_with(&key, || {
                self.upstream_calls.fetch_add(1, Ordering::SeqCst);
                self.inner.complete(prompt)
            })
            .map(|(v, _)| v)
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }

    fn context_chars(&self) -> usize {
        self.inner.context_chars()
    }

    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }
}

/// Encoder behind a [`ResponseCache`]; vectors are stored as JSON arrays.
pub struct CachedEncoder {
    inner: Arc<dyn Encoder>,
    cache: Arc<ResponseCache>,
    upstream_calls: AtomicUsize,
}

impl CachedEncoder {
    pub fn new(inner: Arc<dyn Encoder>, cache: Arc<ResponseCache>) -> Self {
        CachedEncoder {
            inner,
            cache,
            upstream_calls: AtomicUsize::new(0),
        }
    }

    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }
}

impl Encoder for CachedEncoder {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, text: &str) -> Result<Embedding, ProviderError> {
        let key = digest(&format!("embed:{}", self.inner.name()), text);
        let (raw, _) = self.cache.get_or_try_insert_with(&key, || {
            self.upstream_calls.fetch_add(1, Ordering::SeqCst);
            let e = self.inner.encode(text)?;
            serde_json::to_string(e.values()).map_err(|e| ProviderError::Cache(e.to_string()))
        })?;
        let values: Vec<f64> = serde_json::from_str(&raw).map_err(|e| ProviderError::Cache(e.to_string()))?;
        let e = Embedding::new(values).map_err(|e| ProviderError::Cache(e.to_string()))?;
        if e.is_unit() {
            Ok(e)
        } else {
            normalize_upstream(e.into_values())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::deterministic_test_encoder;
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        calls: AtomicUsize,
    }

    impl ChatProvider for Counting {
        fn name(&self) -> &str {
            "counting"
        }
        fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            Ok(format!("{prompt}#{n}"))
        }
    }

    #[test]
    fn digest_is_sha256_of_namespace_and_payload() {
        let d = digest("a", "b");
        assert_eq!(d.len(), 64);
        assert_ne!(d, digest("a", "c"));
        assert_ne!(digest("ab", ""), digest("a", "b"));
    }

    #[test]
    fn repeated_requests_hit_upstream_once() {
        let inner = Arc::new(Counting { calls: AtomicUsize::new(0) });
        let chat = CachedChat::new(inner.clone(), Arc::new(ResponseCache::in_memory()));
        let first = chat.complete("hi").unwrap();
        for _ in 0..5 {
            assert_eq!(chat.complete("hi").unwrap(), first);
        }
        assert_eq!(chat.upstream_calls(), 1);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn concurrent_identical_requests_hit_upstream_once() {
        let inner = Arc::new(Counting { calls: AtomicUsize::new(0) });
        let chat = Arc::new(CachedChat::new(inner.clone(), Arc::new(ResponseCache::in_memory())));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let chat = Arc::clone(&chat);
                std::thread::spawn(move || chat.complete("same").unwrap())
            })
            .collect();
        let outs: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(outs.iter().all(|o| o == &outs[0]));
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn disk_cache_survives_reopen_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.insert("k1", "v1").unwrap();
            cache.insert("k2", "line\nbreak \"quoted\"").unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"digest\":\"k3\",\"resp")
            .unwrap();
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get("k2").unwrap(), "line\nbreak \"quoted\"");
        assert!(cache.get("k3").is_none());
    }

    #[test]
    fn cached_encoder_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let raw = Arc::new(deterministic_test_encoder(32, 5));
        let direct = raw.encode("some text here").unwrap();
        let enc = CachedEncoder::new(raw.clone(), Arc::new(ResponseCache::open(&path).unwrap()));
        assert_eq!(enc.encode("some text here").unwrap(), direct);
        drop(enc);
        let enc = CachedEncoder::new(raw, Arc::new(ResponseCache::open(&path).unwrap()));
        assert_eq!(enc.encode("some text here").unwrap(), direct);
        assert_eq!(enc.upstream_calls(), 0);
    }
}
