//! Uniform completion interface over interchangeable backends — remote API,
//! replay cache, scripted mock — with a per-call token ledger.
//!
//! The gateway is the single chokepoint for the window invariant: a request
//! whose prompt plus output allowance exceeds the backend's context limit is
//! rejected with [`GatewayError::OverLength`] before it reaches any backend.
//! Over-length is an engine bug, never silently truncated here.

mod mock;
mod remote;
mod replay;

pub use mock::{script_mock, MatcherSpec, MockRule, ScriptedBackend};
pub use remote::{RemoteBackend, RemoteConfig};
pub use replay::{request_hash, RecordBackend, ReplayBackend, ReplayStore, StoreRecord};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::count_tokens;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(
        "over-length request: {prompt_tokens} prompt tokens + {max_output_tokens} output \
         allowance exceeds context limit {context_limit}"
    )]
    OverLength {
        prompt_tokens: usize,
        max_output_tokens: usize,
        context_limit: usize,
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("replay cache miss for request hash {hash}")]
    CacheMiss { hash: String },
    #[error("invalid mock rule set: {0}")]
    InvalidRuleSet(String),
    #[error("replay store corrupt: {0}")]
    StoreCorrupt(String),
    #[error("replay store io: {0}")]
    StoreIo(String),
}

/// Static description of a completion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    /// Native context length limit.
    pub context_limit: usize,
    pub max_output_tokens: usize,
    pub cost_per_1m_input: f64,
    pub cost_per_1m_output: f64,
}

impl BackendProfile {
    /// 4K-window default used throughout the engine.
    pub fn default_4k() -> Self {
        Self {
            name: "default-4k".to_string(),
            context_limit: 4096,
            max_output_tokens: 512,
            cost_per_1m_input: 0.5,
            cost_per_1m_output: 1.5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.context_limit == 0 || self.max_output_tokens == 0 {
            return Err("context_limit and max_output_tokens must be positive".to_string());
        }
        if self.context_limit < self.max_output_tokens {
            return Err("context_limit must be >= max_output_tokens".to_string());
        }
        Ok(())
    }
}

/// One single-shot completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_output_tokens: usize,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

/// Backend text plus token accounting for one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub response_tokens: usize,
    pub backend: String,
    pub cache_hit: bool,
}

/// What a backend returns before the gateway fills in accounting. Token
/// counts are echoed from the provider when available, otherwise the local
/// approximation is used.
#[derive(Debug, Clone)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<usize>,
    pub response_tokens: Option<usize>,
    pub cache_hit: bool,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: None,
            response_tokens: None,
            cache_hit: false,
        }
    }
}

/// A completion provider. Implementations must be safe to call from
/// multiple run workers.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError>;
}

/// One ledger row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub call_id: u64,
    pub role: String,
    pub prompt_tokens: usize,
    pub response_tokens: usize,
}

/// Append-only record of per-call token counts with running totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<LedgerEntry>,
    pub total_prompt_tokens: usize,
    pub total_response_tokens: usize,
}

impl CostLedger {
    pub fn append(&mut self, role: &str, prompt_tokens: usize, response_tokens: usize) -> u64 {
        let call_id = self.entries.len() as u64 + 1;
        self.entries.push(LedgerEntry {
            call_id,
            role: role.to_string(),
            prompt_tokens,
            response_tokens,
        });
        self.total_prompt_tokens += prompt_tokens;
        self.total_response_tokens += response_tokens;
        call_id
    }

    pub fn total_tokens(&self) -> usize {
        self.total_prompt_tokens + self.total_response_tokens
    }

    pub fn calls(&self) -> usize {
        self.entries.len()
    }

    /// Check that the running totals equal the sum of the entries.
    pub fn totals_consistent(&self) -> bool {
        let prompt: usize = self.entries.iter().map(|e| e.prompt_tokens).sum();
        let response: usize = self.entries.iter().map(|e| e.response_tokens).sum();
        prompt == self.total_prompt_tokens && response == self.total_response_tokens
    }
}

/// Retry behavior for transport failures.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

/// The completion chokepoint: window check, dispatch, retry, ledger.
///
/// Safe for concurrent use; the ledger serializes appends. A single engine
/// run issues its calls strictly sequentially.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    profile: BackendProfile,
    ledger: Mutex<CostLedger>,
    calls: AtomicU64,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, profile: BackendProfile) -> Self {
        Self {
            backend,
            profile,
            ledger: Mutex::new(CostLedger::default()),
            calls: AtomicU64::new(0),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn ledger_snapshot(&self) -> CostLedger {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    /// Issue one completion. The request must satisfy the window invariant;
    /// the ledger gains exactly one entry tagged with `role` on success.
    pub fn complete(
        &self,
        role: &str,
        request: CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let prompt_tokens = count_tokens(&request.prompt);
        if prompt_tokens + request.max_output_tokens > self.profile.context_limit {
            return Err(GatewayError::OverLength {
                prompt_tokens,
                max_output_tokens: request.max_output_tokens,
                context_limit: self.profile.context_limit,
            });
        }

        let mut last_err = None;
        let mut reply = None;
        for attempt in 0..self.retry.attempts {
            match self.backend.complete(&request) {
                Ok(r) => {
                    reply = Some(r);
                    break;
                }
                Err(GatewayError::Transport(msg)) => {
                    last_err = Some(GatewayError::Transport(msg));
                    if attempt + 1 < self.retry.attempts {
                        std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        let reply = match reply {
            Some(r) => r,
            None => return Err(last_err.expect("retry loop ran at least once")),
        };

        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = CompletionResponse {
            prompt_tokens: reply.prompt_tokens.unwrap_or(prompt_tokens),
            response_tokens: reply.response_tokens.unwrap_or_else(|| count_tokens(&reply.text)),
            backend: self.backend.name().to_string(),
            cache_hit: reply.cache_hit,
            text: reply.text,
        };
        self.ledger
            .lock()
            .expect("ledger poisoned")
            .append(role, response.prompt_tokens, response.response_tokens);
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FlakyBackend {
        failures: AtomicU64,
    }

    impl Backend for FlakyBackend {
        fn name(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(GatewayError::Transport("connection reset".to_string()))
            } else {
                Ok(BackendReply::text("ok"))
            }
        }
    }

    fn echo_gateway() -> Gateway {
        let backend = script_mock(vec![MockRule::catch_all("$0")]).unwrap();
        Gateway::new(Arc::new(backend), BackendProfile::default_4k())
    }

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.to_string(),
            max_output_tokens: 512,
            temperature: 0.0,
            stop_sequences: vec![],
        }
    }

    #[test]
    fn echo_mock_round_trip() {
        let gw = echo_gateway();
        let resp = gw.complete("test", request("hi")).unwrap();
        assert_eq!(resp.text, "hi");
        assert_eq!(resp.prompt_tokens, 1);
        assert_eq!(resp.response_tokens, 1);
        assert!(!resp.cache_hit);
    }

    #[test]
    fn over_length_is_rejected_before_dispatch() {
        let gw = echo_gateway();
        let words: Vec<String> = (0..4096).map(|i| format!("w{i}")).collect();
        let err = gw.complete("test", request(&words.join(" "))).unwrap_err();
        assert!(matches!(err, GatewayError::OverLength { .. }));
        assert_eq!(gw.calls_made(), 0);
        assert_eq!(gw.ledger_snapshot().calls(), 0);
    }

    #[test]
    fn boundary_request_is_accepted() {
        let gw = echo_gateway();
        let words: Vec<String> = (0..3584).map(|i| format!("w{i}")).collect();
        assert_eq!(count_tokens(&words.join(" ")), 3584);
        gw.complete("test", request(&words.join(" "))).unwrap();
    }

    #[test]
    fn ledger_totals_match_entries() {
        let gw = echo_gateway();
        for prompt in ["one", "two words", "three word prompt"] {
            gw.complete("role", request(prompt)).unwrap();
        }
        let ledger = gw.ledger_snapshot();
        assert_eq!(ledger.calls(), 3);
        assert!(ledger.totals_consistent());
        assert_eq!(ledger.total_prompt_tokens, 1 + 2 + 3);
        assert_eq!(ledger.entries[0].call_id, 1);
        assert_eq!(ledger.entries[2].call_id, 3);
    }

    #[test]
    fn transport_errors_retry_then_succeed() {
        let backend = FlakyBackend {
            failures: AtomicU64::new(2),
        };
        let gw = Gateway::new(Arc::new(backend), BackendProfile::default_4k()).with_retry(
            RetryPolicy {
                attempts: 3,
                base_delay: Duration::ZERO,
            },
        );
        let resp = gw.complete("t", request("x")).unwrap();
        assert_eq!(resp.text, "ok");
    }

    #[test]
    fn transport_errors_exhaust_retries() {
        let backend = FlakyBackend {
            failures: AtomicU64::new(10),
        };
        let gw = Gateway::new(Arc::new(backend), BackendProfile::default_4k()).with_retry(
            RetryPolicy {
                attempts: 3,
                base_delay: Duration::ZERO,
            },
        );
        assert!(matches!(
            gw.complete("t", request("x")),
            Err(GatewayError::Transport(_))
        ));
    }
}
