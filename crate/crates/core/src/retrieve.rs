//! Lexical chunk ranking for the retrieve action.
//!
//! The default scorer is BM25 (k1 = 1.5, b = 0.75) with the
//! `log((N - df + 0.5) / (df + 0.5) + 1)` idf variant, which keeps every
//! matching chunk strictly above every non-matching one. A neural scorer
//! can be plugged in behind [`ChunkScorer`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{token_spans, Chunk};

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("cannot build an index over an empty chunk list")]
    EmptyCorpus,
}

/// A chunk position with its relevance score. Ranked lists are sorted by
/// score descending, chunk index ascending.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    pub chunk: usize,
    pub score: f64,
}

/// Anything that can rank the indexed chunk set against a query.
pub trait ChunkScorer: Send + Sync {
    fn rank(&self, query: &str, k: usize) -> Vec<RankedChunk>;
}

/// Scorer selection, driven by the `scorer` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Bm25,
}

/// Immutable BM25 statistics over one chunk set.
#[derive(Debug, Clone)]
pub struct ChunkIndex {
    doc_freq: HashMap<String, usize>,
    term_freqs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

fn terms(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|span| text[span].to_lowercase())
        .collect()
}

/// Build the index. Terms are the tokenizer's token runs, lowercased.
pub fn build_index(chunks: &[Chunk]) -> Result<ChunkIndex, RetrieveError> {
    if chunks.is_empty() {
        return Err(RetrieveError::EmptyCorpus);
    }
    let mut doc_freq: HashMap<String, usize> = HashMap::new();
    let mut term_freqs = Vec::with_capacity(chunks.len());
    let mut lengths = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut tf: HashMap<String, usize> = HashMap::new();
        let toks = terms(&chunk.text);
        lengths.push(toks.len());
        for t in toks {
            *tf.entry(t).or_insert(0) += 1;
        }
        for term in tf.keys() {
            *doc_freq.entry(term.clone()).or_insert(0) += 1;
        }
        term_freqs.push(tf);
    }
    let avg_len = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    Ok(ChunkIndex {
        doc_freq,
        term_freqs,
        lengths,
        avg_len,
        k1: 1.5,
        b: 0.75,
    })
}

impl ChunkIndex {
    pub fn len(&self) -> usize {
        self.term_freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term_freqs.is_empty()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    fn score(&self, chunk: usize, query_terms: &[String]) -> f64 {
        let n = self.len() as f64;
        let tf_map = &self.term_freqs[chunk];
        let dl = self.lengths[chunk] as f64;
        let mut score = 0.0;
        for term in query_terms {
            let Some(&tf) = tf_map.get(term) else {
                continue;
            };
            let df = self.doc_freq(term) as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let tf = tf as f64;
            let norm = if self.avg_len > 0.0 {
                1.0 - self.b + self.b * dl / self.avg_len
            } else {
                1.0
            };
            score += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
        }
        score
    }
}

impl ChunkScorer for ChunkIndex {
    /// Rank all chunks against `query`, returning the top `min(k, n)`.
    /// A query sharing no terms with the corpus yields all-zero scores in
    /// chunk order.
    fn rank(&self, query: &str, k: usize) -> Vec<RankedChunk> {
        let mut query_terms = terms(query);
        query_terms.sort();
        query_terms.dedup();
        let mut ranked: Vec<RankedChunk> = (0..self.len())
            .map(|i| RankedChunk {
                chunk: i,
                score: self.score(i, &query_terms),
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.chunk.cmp(&b.chunk))
        });
        ranked.truncate(k.min(self.len()));
        ranked
    }
}

/// Build the configured scorer over a chunk set.
pub fn build_scorer(kind: ScorerKind, chunks: &[Chunk]) -> Result<Box<dyn ChunkScorer>, RetrieveError> {
    match kind {
        ScorerKind::Bm25 => Ok(Box::new(build_index(chunks)?)),
    }
}
