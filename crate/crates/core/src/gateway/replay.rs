//! Record/replay wrapper: persists (request hash → response) pairs to a
//! newline-delimited JSON store so recorded runs replay byte-identically
//! with the original backend unreachable.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendReply, CompletionRequest, GatewayError};

/// Hash identifying one request: covers the backend name, prompt, output
/// allowance, temperature, and stop sequences.
pub fn request_hash(backend_name: &str, request: &CompletionRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(backend_name.as_bytes());
    hasher.update([0x1f]);
    hasher.update(request.prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(request.max_output_tokens.to_le_bytes());
    hasher.update(request.temperature.to_le_bytes());
    for stop in &request.stop_sequences {
        hasher.update([0x1e]);
        hasher.update(stop.as_bytes());
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRequest {
    pub backend: String,
    pub prompt: String,
    pub max_output_tokens: usize,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub text: String,
    pub prompt_tokens: Option<usize>,
    pub response_tokens: Option<usize>,
}

/// One line of the store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub hash: String,
    pub request: StoredRequest,
    pub response: StoredResponse,
}

impl StoreRecord {
    fn recompute_hash(&self) -> String {
        let req = CompletionRequest {
            prompt: self.request.prompt.clone(),
            max_output_tokens: self.request.max_output_tokens,
            temperature: self.request.temperature,
            stop_sequences: self.request.stop_sequences.clone(),
        };
        request_hash(&self.request.backend, &req)
    }
}

/// On-disk replay store: one NDJSON record per cached call.
pub struct ReplayStore;

impl ReplayStore {
    /// Load and verify a store file. Any record whose hash does not match
    /// its stored request is a corruption error.
    pub fn load(path: &Path) -> Result<HashMap<String, StoreRecord>, GatewayError> {
        let file = File::open(path)
            .map_err(|e| GatewayError::StoreIo(format!("{}: {e}", path.display())))?;
        let mut records = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::StoreIo(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: StoreRecord = serde_json::from_str(&line).map_err(|e| {
                GatewayError::StoreCorrupt(format!("line {}: {e}", lineno + 1))
            })?;
            let expected = record.recompute_hash();
            if expected != record.hash {
                return Err(GatewayError::StoreCorrupt(format!(
                    "line {}: hash mismatch (stored {}, recomputed {})",
                    lineno + 1,
                    record.hash,
                    expected
                )));
            }
            records.insert(record.hash.clone(), record);
        }
        Ok(records)
    }

    /// Rewrite a store file with duplicates removed, preserving first
    /// occurrence order. Returns (records kept, lines dropped).
    pub fn compact(path: &Path) -> Result<(usize, usize), GatewayError> {
        let file = File::open(path)
            .map_err(|e| GatewayError::StoreIo(format!("{}: {e}", path.display())))?;
        let mut seen = HashMap::new();
        let mut ordered = Vec::new();
        let mut dropped = 0usize;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::StoreIo(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: StoreRecord = serde_json::from_str(&line).map_err(|e| {
                GatewayError::StoreCorrupt(format!("line {}: {e}", lineno + 1))
            })?;
            if record.recompute_hash() != record.hash {
                return Err(GatewayError::StoreCorrupt(format!(
                    "line {}: hash mismatch",
                    lineno + 1
                )));
            }
            if seen.insert(record.hash.clone(), ()).is_none() {
                ordered.push(record);
            } else {
                dropped += 1;
            }
        }
        let mut out = File::create(path)
            .map_err(|e| GatewayError::StoreIo(format!("{}: {e}", path.display())))?;
        for record in &ordered {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(out, "{line}").map_err(|e| GatewayError::StoreIo(e.to_string()))?;
        }
        Ok((ordered.len(), dropped))
    }
}

/// Wraps any backend, serving cached responses on repeat requests and
/// appending fresh ones to the store file.
pub struct RecordBackend {
    inner: Arc<dyn Backend>,
    state: Mutex<RecordState>,
    path: PathBuf,
}

struct RecordState {
    file: File,
    cache: HashMap<String, StoreRecord>,
}

impl RecordBackend {
    /// Open (or create) a store at `path` and wrap `inner`. An existing
    /// store is loaded so repeat runs keep their cache hits.
    pub fn new(inner: Arc<dyn Backend>, path: &Path) -> Result<Self, GatewayError> {
        let cache = if path.exists() {
            ReplayStore::load(path)?
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::StoreIo(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            state: Mutex::new(RecordState { file, cache }),
            path: path.to_path_buf(),
        })
    }

    pub fn store_path(&self) -> &Path {
        &self.path
    }
}

impl Backend for RecordBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let hash = request_hash(self.inner.name(), request);
        let mut state = self.state.lock().expect("record state poisoned");
        if let Some(record) = state.cache.get(&hash) {
            return Ok(BackendReply {
                text: record.response.text.clone(),
                prompt_tokens: record.response.prompt_tokens,
                response_tokens: record.response.response_tokens,
                cache_hit: true,
            });
        }
        let reply = self.inner.complete(request)?;
        let record = StoreRecord {
            hash: hash.clone(),
            request: StoredRequest {
                backend: self.inner.name().to_string(),
                prompt: request.prompt.clone(),
                max_output_tokens: request.max_output_tokens,
                temperature: request.temperature,
                stop_sequences: request.stop_sequences.clone(),
            },
            response: StoredResponse {
                text: reply.text.clone(),
                prompt_tokens: reply.prompt_tokens,
                response_tokens: reply.response_tokens,
            },
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(state.file, "{line}").map_err(|e| GatewayError::StoreIo(e.to_string()))?;
        state.cache.insert(hash, record);
        Ok(reply)
    }
}

/// Strict replay: every request must hit the store, otherwise the run fails
/// with a cache miss. The wrapped backend is never contacted (there is none).
pub struct ReplayBackend {
    records: HashMap<String, StoreRecord>,
    backend_name: String,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let records = ReplayStore::load(path)?;
        // Replay keys were hashed under the recorded backend's name.
        let backend_name = records
            .values()
            .next()
            .map(|r| r.request.backend.clone())
            .unwrap_or_else(|| "mock".to_string());
        Ok(Self {
            records,
            backend_name,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        &self.backend_name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let hash = request_hash(&self.backend_name, request);
        let record = self
            .records
            .get(&hash)
            .ok_or(GatewayError::CacheMiss { hash })?;
        Ok(BackendReply {
            text: record.response.text.clone(),
            prompt_tokens: record.response.prompt_tokens,
            response_tokens: record.response.response_tokens,
            cache_hit: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{script_mock, MockRule};
    use super::*;

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.to_string(),
            max_output_tokens: 64,
            temperature: 0.0,
            stop_sequences: vec![],
        }
    }

    #[test]
    fn hash_is_sensitive_to_every_field() {
        let base = request("hello");
        let h = request_hash("mock", &base);
        let mut other = base.clone();
        other.prompt.push('!');
        assert_ne!(h, request_hash("mock", &other));
        let mut other = base.clone();
        other.max_output_tokens += 1;
        assert_ne!(h, request_hash("mock", &other));
        let mut other = base.clone();
        other.temperature = 0.5;
        assert_ne!(h, request_hash("mock", &other));
        let mut other = base.clone();
        other.stop_sequences.push("stop".to_string());
        assert_ne!(h, request_hash("mock", &other));
        assert_ne!(h, request_hash("other", &base));
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("run.ndjson");
        let inner = Arc::new(script_mock(vec![MockRule::catch_all("$0")]).unwrap());

        let recorder = RecordBackend::new(inner, &store).unwrap();
        let first = recorder.complete(&request("alpha")).unwrap();
        assert!(!first.cache_hit);
        let second = recorder.complete(&request("alpha")).unwrap();
        assert!(second.cache_hit);
        assert_eq!(first.text, second.text);
        recorder.complete(&request("beta")).unwrap();

        let replay = ReplayBackend::open(&store).unwrap();
        assert_eq!(replay.len(), 2);
        let replayed = replay.complete(&request("alpha")).unwrap();
        assert_eq!(replayed.text, "alpha");
        assert!(replayed.cache_hit);

        // A request never recorded is a strict miss.
        assert!(matches!(
            replay.complete(&request("gamma")),
            Err(GatewayError::CacheMiss { .. })
        ));
    }

    #[test]
    fn mutated_store_prompt_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("run.ndjson");
        let inner = Arc::new(script_mock(vec![MockRule::catch_all("ok")]).unwrap());
        let recorder = RecordBackend::new(inner, &store).unwrap();
        recorder.complete(&request("original prompt")).unwrap();

        let contents = std::fs::read_to_string(&store).unwrap();
        let tampered = contents.replace("original prompt", "originaX prompt");
        assert_ne!(contents, tampered);
        std::fs::write(&store, tampered).unwrap();

        assert!(matches!(
            ReplayBackend::open(&store),
            Err(GatewayError::StoreCorrupt(_))
        ));
    }

    #[test]
    fn compact_drops_duplicate_lines() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("run.ndjson");
        let inner = Arc::new(script_mock(vec![MockRule::catch_all("ok")]).unwrap());
        let recorder = RecordBackend::new(inner, &store).unwrap();
        recorder.complete(&request("a")).unwrap();
        recorder.complete(&request("b")).unwrap();

        // Duplicate the file contents to simulate overlapping appends.
        let contents = std::fs::read_to_string(&store).unwrap();
        std::fs::write(&store, format!("{contents}{contents}")).unwrap();

        let (kept, dropped) = ReplayStore::compact(&store).unwrap();
        assert_eq!(kept, 2);
        assert_eq!(dropped, 2);
        assert_eq!(ReplayStore::load(&store).unwrap().len(), 2);
    }
}
