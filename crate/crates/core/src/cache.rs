//! Persistent content-addressed cache of backend response bodies.
//!
//! Layout: one append-only JSONL log per backend, `<dir>/<backend_id>.jsonl`,
//! each line `{"body":..,"key":..,"stored_at":..}`. The index is rebuilt in
//! memory when a backend's log is first touched. The first persisted body for
//! a key wins; later duplicates in the log are ignored.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::hash_parts;

/// Environment variable that overrides any configured cache directory.
pub const CACHE_DIR_ENV: &str = "CONSISTENCY_PROBE_CACHE";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("request body is not canonical JSON")]
    NonCanonical,
    #[error("backend id {0:?} is not usable as a cache file name")]
    BadBackendId(String),
    #[error("cache log {path}: line {line} is corrupt: {reason}")]
    Corrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cache i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Either the cache storage failed or the wrapped fetch did.
#[derive(Debug, Error)]
pub enum GetOrFetchError<E> {
    #[error(transparent)]
    Storage(#[from] CacheError),
    #[error("fetch failed: {0}")]
    Fetch(E),
}

/// 256-bit hex digest identifying one request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn parse(s: &str) -> Option<Self> {
        (s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')))
            .then(|| CacheKey(s.to_owned()))
    }
}

/// Returns `body` re-encoded canonically (sorted keys, compact).
pub fn canonicalize_body(body: &str) -> Result<String, CacheError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|_| CacheError::NonCanonical)?;
    serde_json::to_string(&v).map_err(|_| CacheError::NonCanonical)
}

/// Key for a request. The body must already be canonical JSON.
pub fn cache_key(backend_id: &str, path: &str, body: &str) -> Result<CacheKey, CacheError> {
    if canonicalize_body(body)? != body {
        return Err(CacheError::NonCanonical);
    }
    let digest = hash_parts(&[backend_id.as_bytes(), path.as_bytes(), body.as_bytes()]);
    Ok(CacheKey(hex::encode(digest)))
}

/// `CONSISTENCY_PROBE_CACHE` if set, else the configured directory.
pub fn resolve_cache_dir(configured: Option<PathBuf>) -> Option<PathBuf> {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => configured,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    body: String,
    key: String,
    stored_at: u64,
}

/// Result of replaying a cache log.
#[derive(Debug, Default, PartialEq)]
pub struct LogReplay {
    /// Entries in log order, first occurrence of each key only.
    pub entries: Vec<(CacheKey, String)>,
    /// Byte length of the well-formed prefix; anything after is a torn write.
    pub valid_len: usize,
}

/// Replays a log. An unterminated final line is treated as a torn append and
/// excluded from `valid_len`; corruption anywhere else is an error.
pub fn parse_log(bytes: &[u8], path_label: &str) -> Result<LogReplay, CacheError> {
    let mut replay = LogReplay::default();
    let mut seen = std::collections::HashSet::new();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        // A record is committed only once its newline is on disk; keeping a
        // parsable but unterminated tail would glue the next append onto it.
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &rest[..nl];
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<LogLine>(s).map_err(|e| e.to_string()))
            .and_then(|l| {
                CacheKey::parse(&l.key)
                    .map(|k| (k, l.body))
                    .ok_or_else(|| "malformed key".to_string())
            });
        match parsed {
            Ok((key, body)) => {
                if seen.insert(key.clone()) {
                    replay.entries.push((key, body));
                }
            }
            Err(_) if line.iter().all(u8::is_ascii_whitespace) => {}
            Err(reason) => {
                return Err(CacheError::Corrupt {
                    path: path_label.to_owned(),
                    line: line_no,
                    reason,
                })
            }
        }
        offset += nl + 1;
        replay.valid_len = offset;
    }
    Ok(replay)
}

struct Shard {
    file: Option<File>,
    index: HashMap<CacheKey, String>,
}

/// Response cache shared by all backend clients of one run.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    shards: Mutex<HashMap<String, Shard>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    /// Opens (creating if needed) a cache rooted at `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CacheError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| CacheError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: Some(dir),
            shards: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// Cache that never touches disk.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            shards: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn load_shard(&self, backend_id: &str) -> Result<Shard, CacheError> {
        let Some(dir) = &self.dir else {
            return Ok(Shard {
                file: None,
                index: HashMap::new(),
            });
        };
        let path = dir.join(format!("{backend_id}.jsonl"));
        let label = path.display().to_string();
        let io = |source| CacheError::Io {
            path: label.clone(),
            source,
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };
        let replay = parse_log(&bytes, &label)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        if replay.valid_len < bytes.len() {
            file.set_len(replay.valid_len as u64).map_err(io)?;
        }
        Ok(Shard {
            file: Some(file),
            index: replay.entries.into_iter().collect(),
        })
    }

    fn with_shard<T>(
        &self,
        backend_id: &str,
        f: impl FnOnce(&mut Shard) -> Result<T, CacheError>,
    ) -> Result<T, CacheError> {
        if backend_id.is_empty()
            || !backend_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || backend_id.starts_with('.')
        {
            return Err(CacheError::BadBackendId(backend_id.to_owned()));
        }
        let mut shards = self.shards.lock().expect("cache lock poisoned");
        if !shards.contains_key(backend_id) {
            let shard = self.load_shard(backend_id)?;
            shards.insert(backend_id.to_owned(), shard);
        }
        f(shards.get_mut(backend_id).expect("shard inserted above"))
    }

    pub fn get(&self, backend_id: &str, key: &CacheKey) -> Result<Option<String>, CacheError> {
        self.with_shard(backend_id, |s| Ok(s.index.get(key).cloned()))
    }

    /// Stores `body` unless the key is already present; returns the body that
    /// is now authoritative for the key.
    pub fn put(&self, backend_id: &str, key: &CacheKey, body: String) -> Result<String, CacheError> {
        let label = self
            .dir
            .as_ref()
            .map(|d| d.join(format!("{backend_id}.jsonl")).display().to_string())
            .unwrap_or_default();
        self.with_shard(backend_id, |s| {
            if let Some(existing) = s.index.get(key) {
                return Ok(existing.clone());
            }
            if let Some(file) = s.file.as_mut() {
                let stored_at = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                let mut line = serde_json::to_string(&LogLine {
                    body: body.clone(),
                    key: key.0.clone(),
                    stored_at,
                })
                .expect("log line serializes");
                line.push('\n');
                file.write_all(line.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|source| CacheError::Io {
                        path: label.clone(),
                        source,
                    })?;
            }
            s.index.insert(key.clone(), body.clone());
            Ok(body)
        })
    }

    /// Returns the cached body, or runs `fetch` once and persists its result.
    /// Fetch errors are never cached.
    pub async fn get_or_fetch<F, Fut, E>(
        &self,
        backend_id: &str,
        key: &CacheKey,
        fetch: F,
    ) -> Result<String, GetOrFetchError<E>>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<String, E>>,
    {
        if let Some(body) = self.get(backend_id, key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(body);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let body = fetch().await.map_err(GetOrFetchError::Fetch)?;
        Ok(self.put(backend_id, key, body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn key(body: &str) -> CacheKey {
        cache_key("vqa", "/v1/answer", body).unwrap()
    }

    #[test]
    fn key_is_deterministic_and_sensitive() {
        let a = r#"{"seed":1,"x":"y"}"#;
        let b = r#"{"seed":2,"x":"y"}"#;
        assert_eq!(key(a), key(a));
        assert_ne!(key(a), key(b));
        assert_ne!(
            cache_key("vqa", "/v1/answer", a).unwrap(),
            cache_key("vqa2", "/v1/answer", a).unwrap()
        );
        assert_ne!(
            cache_key("vqa", "/v1/answer", a).unwrap(),
            cache_key("vqa", "/v1/generate_question", a).unwrap()
        );
    }

    #[test]
    fn non_canonical_body_rejected() {
        assert!(matches!(
            cache_key("vqa", "/p", r#"{"x":"y","seed":1}"#),
            Err(CacheError::NonCanonical)
        ));
        assert!(matches!(
            cache_key("vqa", "/p", r#"{"seed": 1}"#),
            Err(CacheError::NonCanonical)
        ));
        assert!(matches!(cache_key("vqa", "/p", "{"), Err(CacheError::NonCanonical)));
    }

    #[tokio::test]
    async fn miss_then_hit_fetches_once() {
        let cache = ResponseCache::in_memory();
        let calls = AtomicUsize::new(0);
        let k = key(r#"{"a":1}"#);
        for _ in 0..2 {
            let body = cache
                .get_or_fetch("vqa", &k, || async {
                    calls.fetch_add(1, Ordering::SeqCst);
                    Ok::<_, ()>("resp".to_string())
                })
                .await
                .unwrap();
            assert_eq!(body, "resp");
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
    }

    #[tokio::test]
    async fn fetch_errors_are_not_cached() {
        let cache = ResponseCache::in_memory();
        let calls = AtomicUsize::new(0);
        let k = key(r#"{"a":1}"#);
        let first = cache
            .get_or_fetch("vqa", &k, || async {
                calls.fetch_add(1, Ordering::SeqCst);
                Err::<String, _>("boom")
            })
            .await;
        assert!(matches!(first, Err(GetOrFetchError::Fetch("boom"))));
        let second = cache
            .get_or_fetch("vqa", &k, || async {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok::<_, &str>("ok".into())
            })
            .await
            .unwrap();
        assert_eq!(second, "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn first_persisted_wins() {
        let cache = ResponseCache::in_memory();
        let k = key(r#"{"a":1}"#);
        assert_eq!(cache.put("vqa", &k, "one".into()).unwrap(), "one");
        assert_eq!(cache.put("vqa", &k, "two".into()).unwrap(), "one");
    }

    #[test]
    fn persisted_entries_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let k = key(r#"{"a":1}"#);
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cache.put("vqa", &k, "{\"scores\":[0.5]}".into()).unwrap();
        }
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(
            cache.get("vqa", &k).unwrap().as_deref(),
            Some("{\"scores\":[0.5]}")
        );
        assert!(dir.path().join("vqa.jsonl").exists());
    }

    #[test]
    fn torn_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let k = key(r#"{"a":1}"#);
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cache.put("vqa", &k, "x".into()).unwrap();
        }
        let path = dir.path().join("vqa.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"body\":\"tor").unwrap();
        drop(f);
        let k2 = key(r#"{"a":2}"#);
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            assert_eq!(cache.get("vqa", &k).unwrap().as_deref(), Some("x"));
            cache.put("vqa", &k2, "y".into()).unwrap();
        }
        let replay = parse_log(&fs::read(&path).unwrap(), "t").unwrap();
        assert_eq!(replay.entries.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let good = format!(
            "{{\"body\":\"x\",\"key\":\"{}\",\"stored_at\":0}}\n",
            key("1").as_str()
        );
        let log = format!("{good}garbage\n{good}");
        assert!(matches!(
            parse_log(log.as_bytes(), "t"),
            Err(CacheError::Corrupt { line: 2, .. })
        ));
    }

    #[test]
    fn rejects_path_like_backend_ids() {
        let cache = ResponseCache::in_memory();
        let k = key("1");
        for id in ["", "../x", "a/b", ".hidden"] {
            assert!(matches!(cache.get(id, &k), Err(CacheError::BadBackendId(_))));
        }
    }
}
