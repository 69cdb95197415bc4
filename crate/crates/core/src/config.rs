//! Run configuration: window and budget arithmetic, backend selection,
//! strategy choice.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::StrategyName;
use crate::gateway::RemoteConfig;
use crate::retrieve::ScorerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which backend serves completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSelection {
    /// Scripted mock; rules come from a JSON file, or a single `"null"`
    /// catch-all when no file is given.
    Mock { rules: Option<PathBuf> },
    /// Strict replay from a recorded store; misses are errors.
    Replay { store: PathBuf },
    /// Remote backend with every call recorded to the store.
    Record {
        store: PathBuf,
        remote: RemoteConfig,
    },
    /// Remote backend, no recording.
    Remote { remote: RemoteConfig },
}

impl Default for BackendSelection {
    fn default() -> Self {
        BackendSelection::Mock { rules: None }
    }
}

/// The strategy a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    /// The adaptive decision loop.
    LcBoost,
    /// One of the fixed baseline strategies.
    Baseline(StrategyName),
}

impl std::str::FromStr for StrategyChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "lcboost" {
            return Ok(StrategyChoice::LcBoost);
        }
        s.parse::<StrategyName>().map(StrategyChoice::Baseline)
    }
}

impl std::fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StrategyChoice::LcBoost => write!(f, "lcboost"),
            StrategyChoice::Baseline(name) => write!(f, "{name}"),
        }
    }
}

/// Budgets and knobs for a run.
///
/// The window splits as `chunk_budget + evidence_budget + prompt_reserve
/// <= window`, where the reserve covers template overhead, the query, and
/// the output allowance (`max_output_tokens <= prompt_reserve`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub window: usize,
    pub chunk_budget: usize,
    pub evidence_budget: usize,
    pub prompt_reserve: usize,
    pub max_output_tokens: usize,
    pub top_k: usize,
    pub seed: u64,
    pub strategy: StrategyChoice,
    pub concurrency: usize,
    pub temperature: f64,
    /// Maps local tokens to backend tokens in cost reports.
    pub token_calibration: f64,
    pub scorer: ScorerKind,
    pub strict_ingest: bool,
    pub backend: BackendSelection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: 4096,
            chunk_budget: 2048,
            evidence_budget: 1024,
            prompt_reserve: 1024,
            max_output_tokens: 512,
            top_k: 3,
            seed: 0,
            strategy: StrategyChoice::LcBoost,
            concurrency: 1,
            temperature: 0.0,
            token_calibration: 1.0,
            scorer: ScorerKind::Bm25,
            strict_ingest: true,
            backend: BackendSelection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window == 0
            || self.chunk_budget == 0
            || self.evidence_budget == 0
            || self.prompt_reserve == 0
            || self.max_output_tokens == 0
        {
            return Err(ConfigError::Invalid(
                "window and budgets must be positive".to_string(),
            ));
        }
        if self.chunk_budget + self.evidence_budget + self.prompt_reserve > self.window {
            return Err(ConfigError::Invalid(format!(
                "chunk_budget {} + evidence_budget {} + prompt_reserve {} exceeds window {}",
                self.chunk_budget, self.evidence_budget, self.prompt_reserve, self.window
            )));
        }
        if self.max_output_tokens > self.prompt_reserve {
            return Err(ConfigError::Invalid(format!(
                "max_output_tokens {} exceeds prompt_reserve {}",
                self.max_output_tokens, self.prompt_reserve
            )));
        }
        if self.top_k == 0 {
            return Err(ConfigError::Invalid("top_k must be positive".to_string()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid(
                "concurrency must be positive".to_string(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(ConfigError::Invalid(
                "temperature must be non-negative".to_string(),
            ));
        }
        if self.token_calibration <= 0.0 {
            return Err(ConfigError::Invalid(
                "token_calibration must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Largest prompt the gateway will accept.
    pub fn prompt_allowance(&self) -> usize {
        self.window - self.max_output_tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn budget_overflow_is_rejected() {
        let cfg = RunConfig {
            chunk_budget: 4096,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_allowance_must_fit_reserve() {
        let cfg = RunConfig {
            max_output_tokens: 2048,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strategy_parses_from_cli_names() {
        assert_eq!(
            "lcboost".parse::<StrategyChoice>().unwrap(),
            StrategyChoice::LcBoost
        );
        assert!(matches!(
            "retrieve_only".parse::<StrategyChoice>().unwrap(),
            StrategyChoice::Baseline(_)
        ));
        assert!("bogus".parse::<StrategyChoice>().is_err());
    }
}
