//! Append-only response store keyed by a SHA-256 request digest.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatMessage, ChatRequest, ChatResponse};

pub const CACHE_FILE: &str = "responses.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

#[derive(Serialize)]
struct KeyMaterial<'a> {
    provider: &'a str,
    model_id: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: &'a [ChatMessage],
    extra: &'a std::collections::BTreeMap<String, String>,
}

impl CacheKey {
    /// Digest over provider identity, model, decoding knobs, messages and
    /// extras. Extras live in a sorted map, so insertion order is irrelevant.
    pub fn for_request(provider: &str, req: &ChatRequest) -> Self {
        let material = KeyMaterial {
            provider,
            model_id: &req.model_id,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            messages: &req.messages,
            extra: &req.extra,
        };
        let bytes = serde_json::to_vec(&material).expect("serializable");
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: CacheKey,
    response: ChatResponse,
}

/// Safe to share between threads and between processes: appends take an
/// exclusive file lock, and a torn trailing line is skipped on load.
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    index: Mutex<HashMap<CacheKey, ChatResponse>>,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        let path = dir.join(CACHE_FILE);
        let err = |reason: String| BackendError::Cache {
            path: path.clone(),
            reason,
        };
        fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        let mut index = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| err(e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| err(e.to_string()))?;
                match serde_json::from_str::<Entry>(&line) {
                    Ok(entry) => {
                        index.entry(entry.key).or_insert(entry.response);
                    }
                    Err(e) => {
                        tracing::warn!(path = %path.display(), error = %e, "skipping unreadable cache line")
                    }
                }
            }
            // Terminate a torn last line so the next append starts cleanly.
            let bytes = fs::read(&path).map_err(|e| err(e.to_string()))?;
            if bytes.last().is_some_and(|&b| b != b'\n') {
                let mut f = OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| err(e.to_string()))?;
                f.write_all(b"\n").map_err(|e| err(e.to_string()))?;
            }
        }
        Ok(Self {
            path,
            index: Mutex::new(index),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A missing key is a miss, never an error.
    pub fn get(&self, key: &CacheKey) -> Option<ChatResponse> {
        self.index.lock().expect("cache poisoned").get(key).cloned()
    }

    /// First write wins: a key already present is left untouched.
    pub fn put(&self, key: &CacheKey, response: &ChatResponse) -> Result<(), BackendError> {
        let mut index = self.index.lock().expect("cache poisoned");
        if index.contains_key(key) {
            return Ok(());
        }
        let err = |reason: String| BackendError::Cache {
            path: self.path.clone(),
            reason,
        };
        let mut line = serde_json::to_vec(&Entry {
            key: key.clone(),
            response: response.clone(),
        })
        .expect("serializable");
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| err(e.to_string()))?;
        file.lock().map_err(|e| err(e.to_string()))?;
        let written = file.write_all(&line).and_then(|_| file.flush());
        let _ = file.unlock();
        written.map_err(|e| err(e.to_string()))?;
        index.insert(key.clone(), response.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::backend::FinishReason;

    fn response(content: &str) -> ChatResponse {
        ChatResponse {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            latency: Duration::from_millis(12),
            raw: serde_json::json!({"id": "x"}),
        }
    }

    #[test]
    fn key_ignores_extra_order_and_meta() {
        let mut a = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
        a.extra.insert("b".into(), "2".into());
        a.extra.insert("a".into(), "1".into());
        let mut b = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
        b.extra.insert("a".into(), "1".into());
        b.extra.insert("b".into(), "2".into());
        b.meta.insert("stage".into(), "task".into());
        assert_eq!(
            CacheKey::for_request("p", &a),
            CacheKey::for_request("p", &b)
        );

        b.messages[0].content.push('!');
        assert_ne!(
            CacheKey::for_request("p", &a),
            CacheKey::for_request("p", &b)
        );
        assert_ne!(
            CacheKey::for_request("p", &a),
            CacheKey::for_request("q", &a)
        );
        let mut c = a.clone();
        c.temperature = 0.5;
        assert_ne!(
            CacheKey::for_request("p", &a),
            CacheKey::for_request("p", &c)
        );
    }

    #[test]
    fn round_trip_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let key = CacheKey("k1".into());
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            assert!(cache.get(&key).is_none());
            cache.put(&key, &response("one")).unwrap();
            cache.put(&key, &response("two")).unwrap();
            assert_eq!(cache.get(&key).unwrap().content, "one");
        }
        // simulate a crash mid-append
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join(CACHE_FILE))
            .unwrap();
        f.write_all(b"{\"key\":\"k2\",\"respo").unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get(&key).unwrap(), response("one"));
        let k3 = CacheKey("k3".into());
        cache.put(&k3, &response("three")).unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get(&k3).unwrap().content, "three");
    }
}
