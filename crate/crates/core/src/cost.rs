//! Closed-form token, FLOPs, and energy accounting for brute-force versus
//! chunked processing of long inputs.
//!
//! The FLOPs convention is the dense-transformer forward pass
//! `2·P·T + 2·ℓ·d·T²` (linear parameter term plus quadratic attention
//! term), single pass, no generation-phase KV costs. The formula lives
//! behind [`ModelShape`] so an alternate convention can be swapped in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::CostLedger;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("token ratio undefined: baseline ledger has zero total tokens")]
    DivisionUndefined,
}

/// Dense transformer shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Parameter count P.
    pub params: f64,
    /// Hidden size d.
    pub hidden_size: f64,
    /// Layer count ℓ.
    pub layers: f64,
}

impl ModelShape {
    /// 7B-class profile: P = 6.74e9, d = 4096, ℓ = 32.
    pub fn llama_7b() -> Self {
        Self {
            params: 6.74e9,
            hidden_size: 4096.0,
            layers: 32.0,
        }
    }
}

/// Accelerator throughput and power draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Peak throughput in FLOP/s.
    pub peak_flops: f64,
    /// Power draw in watts.
    pub power_watts: f64,
}

impl Default for HardwareProfile {
    /// A100-class: 312 TFLOP/s bf16, 400 W TDP.
    fn default() -> Self {
        Self {
            peak_flops: 312e12,
            power_watts: 400.0,
        }
    }
}

/// Forward-pass FLOPs for a sequence of `seq_len` tokens.
pub fn forward_flops(shape: &ModelShape, seq_len: u64) -> f64 {
    assert!(seq_len >= 1, "seq_len must be >= 1");
    let t = seq_len as f64;
    2.0 * shape.params * t + 2.0 * shape.layers * shape.hidden_size * t * t
}

/// Energy in joules: `flops / throughput × power`.
pub fn energy_joules(flops: f64, hw: &HardwareProfile) -> f64 {
    assert!(flops >= 0.0, "flops must be non-negative");
    flops / hw.peak_flops * hw.power_watts
}

/// Modeled cost of one processing scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCost {
    pub flops: f64,
    pub joules: f64,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
}

impl ScenarioCost {
    fn from_flops(flops: f64, prompt_tokens: u64, hw: &HardwareProfile) -> Self {
        Self {
            flops,
            joules: energy_joules(flops, hw),
            prompt_tokens,
            response_tokens: 0,
        }
    }
}

/// Compare processing `doc_len` tokens in one pass against processing it in
/// `ceil(doc_len / window)` windows of `window + per_chunk_overhead` tokens.
pub fn scenario_compare(
    doc_len: u64,
    window: u64,
    per_chunk_overhead: u64,
    shape: &ModelShape,
    hw: &HardwareProfile,
) -> (ScenarioCost, ScenarioCost) {
    assert!(window >= 1 && window <= doc_len, "window must be in 1..=doc_len");
    let brute = ScenarioCost::from_flops(forward_flops(shape, doc_len), doc_len, hw);
    let n_chunks = doc_len.div_ceil(window);
    let per_call = window + per_chunk_overhead;
    let chunked = ScenarioCost::from_flops(
        n_chunks as f64 * forward_flops(shape, per_call),
        n_chunks * per_call,
        hw,
    );
    (brute, chunked)
}

/// One row of the energy sweep CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub doc_len: u64,
    pub scenario: String,
    pub flops: f64,
    pub joules: f64,
    pub prompt_tokens: u64,
}

/// Sweep document lengths and emit brute/chunked rows for each.
pub fn energy_sweep(
    start: u64,
    end: u64,
    step: u64,
    window: u64,
    per_chunk_overhead: u64,
    shape: &ModelShape,
    hw: &HardwareProfile,
) -> Vec<SweepRow> {
    assert!(step >= 1 && start >= window && end >= start);
    let mut rows = Vec::new();
    let mut doc_len = start;
    while doc_len <= end {
        let (brute, chunked) = scenario_compare(doc_len, window, per_chunk_overhead, shape, hw);
        rows.push(SweepRow {
            doc_len,
            scenario: "brute_force".to_string(),
            flops: brute.flops,
            joules: brute.joules,
            prompt_tokens: brute.prompt_tokens,
        });
        rows.push(SweepRow {
            doc_len,
            scenario: "chunked".to_string(),
            flops: chunked.flops,
            joules: chunked.joules,
            prompt_tokens: chunked.prompt_tokens,
        });
        doc_len += step;
    }
    rows
}

/// End-to-end token totals of a strategy ledger against a baseline ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRatioReport {
    pub strategy_prompt_tokens: usize,
    pub strategy_response_tokens: usize,
    pub baseline_prompt_tokens: usize,
    pub baseline_response_tokens: usize,
    /// (strategy prompt + response) / (baseline prompt + response).
    pub ratio: f64,
}

pub fn token_report(ledger: &CostLedger, baseline: &CostLedger) -> Result<TokenRatioReport, CostError> {
    let strategy_total = ledger.total_prompt_tokens + ledger.total_response_tokens;
    let baseline_total = baseline.total_prompt_tokens + baseline.total_response_tokens;
    if baseline_total == 0 {
        return Err(CostError::DivisionUndefined);
    }
    Ok(TokenRatioReport {
        strategy_prompt_tokens: ledger.total_prompt_tokens,
        strategy_response_tokens: ledger.total_response_tokens,
        baseline_prompt_tokens: baseline.total_prompt_tokens,
        baseline_response_tokens: baseline.total_response_tokens,
        ratio: strategy_total as f64 / baseline_total as f64,
    })
}
