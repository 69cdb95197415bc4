//! Deterministic tokenization approximation and long-context decomposition.
//!
//! A "token" here is a maximal run of alphanumeric characters or a single
//! other non-whitespace character. This is a local, reproducible proxy for
//! backend tokenizers; a calibration factor in the run config maps local
//! tokens to backend tokens for cost reporting.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Count tokens in `text`: maximal alphanumeric runs count once, every other
/// non-whitespace character counts once, whitespace yields nothing.
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_run = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if !in_run {
                count += 1;
                in_run = true;
            }
        } else {
            in_run = false;
            if !ch.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Byte spans of the tokens of `text`, in order. `count_tokens(text)`
/// equals the number of spans returned.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else {
            if let Some(s) = run_start.take() {
                spans.push(s..i);
            }
            if !ch.is_whitespace() {
                spans.push(i..i + ch.len_utf8());
            }
        }
    }
    if let Some(s) = run_start {
        spans.push(s..text.len());
    }
    spans
}

/// A full input context plus its token count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub text: String,
    pub token_count: usize,
}

impl ContextDocument {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let token_count = count_tokens(&text);
        Self { text, token_count }
    }
}

/// One decomposed short context.
///
/// Chunks of a document have contiguous, non-overlapping byte spans whose
/// union is the whole document; concatenating chunk texts in index order
/// reproduces the source text exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// 0-based position among the document's chunks.
    pub index: usize,
    pub text: String,
    /// Half-open byte offsets into the source document.
    pub span: Range<usize>,
    pub token_count: usize,
    /// True when this chunk ends at a forced character-level cut (no
    /// paragraph, sentence, or whitespace boundary was available in range).
    pub hard_split: bool,
}

/// Split `doc` into chunks of at most `chunk_budget` tokens each.
///
/// Cut points prefer, in order: the latest paragraph boundary, the latest
/// sentence boundary, the latest whitespace boundary, and finally a hard
/// character split at the budget limit.
pub fn decompose(doc: &ContextDocument, chunk_budget: usize) -> Vec<Chunk> {
    assert!(chunk_budget >= 1, "chunk_budget must be >= 1");
    let text = &doc.text;
    let spans = token_spans(text);
    let n = spans.len();

    let mut chunks = Vec::new();
    let mut pos = 0usize; // byte cursor
    let mut ti = 0usize; // first token not wholly before pos
    loop {
        if n - ti <= chunk_budget {
            push_chunk(&mut chunks, text, pos..text.len(), false);
            break;
        }
        // Any cut in (pos, max_cut] keeps this chunk within budget.
        let max_cut = spans[ti + chunk_budget].start;
        let (cut, hard) = match find_cut(text, pos, max_cut) {
            Some(c) => (c, false),
            None => (max_cut, true),
        };
        push_chunk(&mut chunks, text, pos..cut, hard);
        pos = cut;
        while ti < n && spans[ti].end <= pos {
            ti += 1;
        }
    }
    chunks
}

fn push_chunk(chunks: &mut Vec<Chunk>, text: &str, span: Range<usize>, hard_split: bool) {
    let body = &text[span.clone()];
    chunks.push(Chunk {
        index: chunks.len(),
        text: body.to_string(),
        token_count: count_tokens(body),
        span,
        hard_split,
    });
}

/// Latest soft cut position in `(pos, max_cut]`, preferring paragraph over
/// sentence over whitespace boundaries. Returns `None` when only a hard
/// character split is possible.
fn find_cut(text: &str, pos: usize, max_cut: usize) -> Option<usize> {
    let window = &text[pos..max_cut];

    // Paragraph: immediately after a blank line.
    if let Some(i) = window.rfind("\n\n") {
        return Some(pos + i + 2);
    }

    let mut sentence_cut = None;
    let mut whitespace_cut = None;
    for (i, ch) in window.char_indices().rev() {
        let after = pos + i + ch.len_utf8();
        if whitespace_cut.is_none() && ch.is_whitespace() && after > pos {
            whitespace_cut = Some(after);
        }
        if matches!(ch, '.' | '!' | '?') {
            let followed_by_ws = text[after..].chars().next().is_none_or(|c| c.is_whitespace());
            if followed_by_ws && after <= max_cut {
                sentence_cut = Some(after);
                break; // latest sentence cut found; whitespace cut is already latest
            }
        }
    }
    sentence_cut.or(whitespace_cut)
}

/// A sentence of a chunk: 1-based identifier plus the byte span within the
/// chunk text. Spans partition the chunk; trailing whitespace between
/// sentences is attached to the preceding span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub span: Range<usize>,
}

/// A chunk whose sentences have been identified for the extract prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceAnnotatedChunk {
    pub chunk: Chunk,
    pub sentences: Vec<Sentence>,
}

impl SentenceAnnotatedChunk {
    /// Whitespace-trimmed text of the sentence with the given 1-based id.
    pub fn sentence_text(&self, id: usize) -> Option<&str> {
        let s = self.sentences.get(id.checked_sub(1)?)?;
        Some(self.chunk.text[s.span.clone()].trim())
    }

    /// Render all sentences as "[s{k}] {text}" lines.
    pub fn rendered(&self) -> String {
        self.render_ids(1..=self.sentences.len())
    }

    /// Render a contiguous range of sentence ids as "[s{k}] {text}" lines.
    pub fn render_ids(&self, ids: std::ops::RangeInclusive<usize>) -> String {
        let mut out = String::new();
        for id in ids {
            if let Some(text) = self.sentence_text(id) {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[s{id}] {text}"));
            }
        }
        out
    }
}

/// Split a chunk into identified sentences. Boundaries fall after terminal
/// punctuation (`.` `!` `?`) followed by whitespace, and after newlines.
pub fn annotate_sentences(chunk: &Chunk) -> SentenceAnnotatedChunk {
    let text = &chunk.text;
    let mut sentences = Vec::new();
    let mut start = 0usize;

    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0usize;
    while i < chars.len() {
        let (idx, ch) = chars[i];
        let terminal = matches!(ch, '.' | '!' | '?');
        let newline = ch == '\n';
        let boundary = if terminal {
            chars
                .get(i + 1)
                .is_none_or(|&(_, next)| next.is_whitespace())
        } else {
            newline
        };
        if boundary {
            // Sentence core ends after the punctuation (or before the
            // newline); absorb the following whitespace run into the span.
            let mut end = if terminal { idx + ch.len_utf8() } else { idx };
            let mut j = if terminal { i + 1 } else { i };
            while j < chars.len() && chars[j].1.is_whitespace() {
                end = chars[j].0 + chars[j].1.len_utf8();
                j += 1;
            }
            sentences.push(Sentence {
                id: sentences.len() + 1,
                span: start..end,
            });
            start = end;
            i = j;
        } else {
            i += 1;
        }
    }
    if start < text.len() {
        sentences.push(Sentence {
            id: sentences.len() + 1,
            span: start..text.len(),
        });
    }
    SentenceAnnotatedChunk {
        chunk: chunk.clone(),
        sentences,
    }
}

/// Keep the first `ceil(limit/2)` and last `floor(limit/2)` tokens of `doc`,
/// dropping the middle. Documents within the limit are returned unchanged.
pub fn truncate_middle(doc: &ContextDocument, limit: usize) -> ContextDocument {
    assert!(limit >= 2, "limit must be >= 2");
    if doc.token_count <= limit {
        return doc.clone();
    }
    let spans = token_spans(&doc.text);
    let head = limit.div_ceil(2);
    let tail = limit / 2;
    let head_end = spans[head].start;
    let tail_start = spans[spans.len() - tail].start;
    let mut text = String::with_capacity(head_end + (doc.text.len() - tail_start));
    text.push_str(&doc.text[..head_end]);
    text.push_str(&doc.text[tail_start..]);
    ContextDocument::new(text)
}

/// Keep at most the first `limit` tokens of `text` (plus any trailing
/// non-token bytes before the next token). Used to hard-enforce evidence
/// budgets on backend output that ignores its token allowance.
pub fn token_prefix(text: &str, limit: usize) -> &str {
    let spans = token_spans(text);
    if spans.len() <= limit {
        return text;
    }
    &text[..spans[limit].start]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn count_tokens_rule() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("hello, world"), 3);
        assert_eq!(count_tokens("a b c"), 3);
        assert_eq!(count_tokens("  \n\t "), 0);
        assert_eq!(count_tokens("a,b"), 3);
        assert_eq!(count_tokens("héllo wörld"), 2);
    }

    #[test]
    fn token_spans_cover_tokens() {
        let spans = token_spans("hello, world");
        assert_eq!(spans, vec![0..5, 5..6, 7..12]);
    }

    #[test]
    fn decompose_single_chunk_when_under_budget() {
        let doc = ContextDocument::new("short text here");
        let chunks = decompose(&doc, 100);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, doc.text);
        assert_eq!(chunks[0].span, 0..doc.text.len());
        assert!(!chunks[0].hard_split);
    }

    #[test]
    fn decompose_splits_at_paragraphs() {
        let doc = ContextDocument::new("P1.\n\nP2.\n\nP3.");
        let chunks = decompose(&doc, 2);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].text, "P1.\n\n");
        assert_eq!(chunks[1].text, "P2.\n\n");
        assert_eq!(chunks[2].text, "P3.");
        assert!(chunks.iter().all(|c| c.token_count <= 2));
    }

    #[test]
    fn decompose_concat_reproduces_document() {
        let doc = ContextDocument::new("One sentence. Another one! And a third? Plus\nmore text");
        let chunks = decompose(&doc, 3);
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(joined, doc.text);
    }

    #[test]
    fn decompose_hard_splits_unbroken_runs() {
        let doc = ContextDocument::new("a,b,c,d,e,f");
        let chunks = decompose(&doc, 2);
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(joined, doc.text);
        assert!(chunks.iter().all(|c| c.token_count <= 2));
        assert!(chunks.iter().any(|c| c.hard_split));
    }

    #[test]
    fn annotate_splits_on_terminal_punctuation() {
        let chunk = Chunk {
            index: 0,
            text: "A. B.".to_string(),
            span: 0..5,
            token_count: 4,
            hard_split: false,
        };
        let ann = annotate_sentences(&chunk);
        assert_eq!(ann.sentences.len(), 2);
        assert_eq!(ann.sentence_text(1), Some("A."));
        assert_eq!(ann.sentence_text(2), Some("B."));
        assert_eq!(ann.rendered(), "[s1] A.\n[s2] B.");
        // Spans partition the chunk text.
        assert_eq!(ann.sentences[0].span, 0..3);
        assert_eq!(ann.sentences[1].span, 3..5);
    }

    #[test]
    fn annotate_single_sentence_without_punctuation() {
        let chunk = Chunk {
            index: 0,
            text: "no terminal punctuation".to_string(),
            span: 0..23,
            token_count: 3,
            hard_split: false,
        };
        let ann = annotate_sentences(&chunk);
        assert_eq!(ann.sentences.len(), 1);
        assert_eq!(ann.sentence_text(1), Some("no terminal punctuation"));
    }

    #[test]
    fn annotate_empty_chunk() {
        let chunk = Chunk {
            index: 0,
            text: String::new(),
            span: 0..0,
            token_count: 0,
            hard_split: false,
        };
        assert!(annotate_sentences(&chunk).sentences.is_empty());
    }

    #[test]
    fn annotate_splits_on_newlines() {
        let chunk = Chunk {
            index: 0,
            text: "line one\nline two".to_string(),
            span: 0..17,
            token_count: 4,
            hard_split: false,
        };
        let ann = annotate_sentences(&chunk);
        assert_eq!(ann.sentence_text(1), Some("line one"));
        assert_eq!(ann.sentence_text(2), Some("line two"));
    }

    #[test]
    fn truncate_middle_under_limit_is_identity() {
        let doc = ContextDocument::new("one two three four five six seven eight nine ten");
        assert_eq!(truncate_middle(&doc, 10), doc);
    }

    #[test]
    fn truncate_middle_keeps_head_and_tail() {
        let doc = ContextDocument::new("t1 t2 t3 t4 t5 t6 t7 t8 t9 t10");
        let out = truncate_middle(&doc, 4);
        assert_eq!(out.text, "t1 t2 t9 t10");
        assert_eq!(out.token_count, 4);
    }

    #[test]
    fn truncate_middle_limit_two() {
        let doc = ContextDocument::new("a b c");
        let out = truncate_middle(&doc, 2);
        assert_eq!(out.text, "a c");
    }

    #[test]
    fn token_prefix_limits_tokens() {
        assert_eq!(token_prefix("a b c d", 2), "a b ");
        assert_eq!(token_prefix("a b", 5), "a b");
        assert_eq!(count_tokens(token_prefix("x, y, z", 3)), 3);
    }

    proptest! {
        #[test]
        fn decompose_partitions_any_text(text in "\\PC{0,400}", budget in 1usize..40) {
            let doc = ContextDocument::new(text);
            let chunks = decompose(&doc, budget);
            let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
            prop_assert_eq!(&joined, &doc.text);
            // Spans are contiguous and cover the document.
            let mut pos = 0;
            for c in &chunks {
                prop_assert_eq!(c.span.start, pos);
                pos = c.span.end;
            }
            prop_assert_eq!(pos, doc.text.len());
            for c in &chunks {
                prop_assert!(c.token_count <= budget);
            }
        }

        #[test]
        fn decompose_is_deterministic(text in "\\PC{0,200}", budget in 1usize..20) {
            let doc = ContextDocument::new(text);
            prop_assert_eq!(decompose(&doc, budget), decompose(&doc, budget));
        }

        #[test]
        fn halving_budget_never_reduces_chunk_count(
            text in "[a-z .!?\\n]{0,400}",
            budget in 2usize..40,
        ) {
            let doc = ContextDocument::new(text);
            let full = decompose(&doc, budget).len();
            let half = decompose(&doc, budget / 2).len();
            prop_assert!(half >= full);
        }

        #[test]
        fn sentence_spans_partition_chunk(text in "\\PC{0,200}") {
            let doc = ContextDocument::new(text);
            let chunks = decompose(&doc, 16);
            for chunk in &chunks {
                let ann = annotate_sentences(chunk);
                let mut pos = 0;
                for s in &ann.sentences {
                    prop_assert_eq!(s.span.start, pos);
                    pos = s.span.end;
                }
                if !chunk.text.is_empty() {
                    prop_assert_eq!(pos, chunk.text.len());
                }
            }
        }

        #[test]
        fn truncate_middle_respects_limit(text in "\\PC{0,400}", limit in 2usize..30) {
            let doc = ContextDocument::new(text);
            let out = truncate_middle(&doc, limit);
            prop_assert!(out.token_count <= limit);
            if doc.token_count <= limit {
                prop_assert_eq!(out, doc);
            }
        }
    }
}
