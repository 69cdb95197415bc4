//! Prompt template registry with strict placeholder substitution, plus the
//! parsers for the structured outputs the templates ask for.
//!
//! Template bodies are data files under `templates/`, one per template,
//! listed in `templates/manifest.json` together with their required and
//! optional placeholders. The built-in set is embedded at compile time; an
//! alternate directory can be loaded to swap task prompts.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("template {template}: missing binding {name}")]
    MissingBinding { template: String, name: String },
    #[error("no option in 1..=4 found in response")]
    Unparseable,
    #[error("failed to load template set: {0}")]
    Load(String),
}

/// A named template body with its placeholder contract.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required: Vec<String>,
    /// Placeholders whose block (the placeholder line plus the header line
    /// directly above it) is dropped when no binding is supplied.
    pub optional: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    templates: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    required: Vec<String>,
    #[serde(default)]
    optional: Vec<String>,
}

const BUILTIN_MANIFEST: &str = include_str!("../templates/manifest.json");

fn builtin_body(file: &str) -> Option<&'static str> {
    Some(match file {
        "task_understanding.txt" => include_str!("../templates/task_understanding.txt"),
        "query_rewrite.txt" => include_str!("../templates/query_rewrite.txt"),
        "append_extract.txt" => include_str!("../templates/append_extract.txt"),
        "merge_summarize.txt" => include_str!("../templates/merge_summarize.txt"),
        "answer_with_null.txt" => include_str!("../templates/answer_with_null.txt"),
        "answer_plain.txt" => include_str!("../templates/answer_plain.txt"),
        "answer_summarize.txt" => include_str!("../templates/answer_summarize.txt"),
        "answer_code.txt" => include_str!("../templates/answer_code.txt"),
        "recompress.txt" => include_str!("../templates/recompress.txt"),
        _ => return None,
    })
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").unwrap())
}

/// Immutable registry of templates; safe to share across run workers.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: HashMap<String, PromptTemplate>,
}

impl TemplateRegistry {
    /// The embedded template set.
    pub fn builtin() -> Self {
        let manifest: ManifestFile =
            serde_json::from_str(BUILTIN_MANIFEST).expect("embedded manifest is valid");
        let mut templates = HashMap::new();
        for entry in manifest.templates {
            let body = builtin_body(&entry.file)
                .unwrap_or_else(|| panic!("embedded template {} missing", entry.file))
                .to_string();
            templates.insert(
                entry.name.clone(),
                PromptTemplate {
                    name: entry.name,
                    body,
                    required: entry.required,
                    optional: entry.optional,
                },
            );
        }
        Self { templates }
    }

    /// Load a template set from a directory containing `manifest.json`.
    /// Templates named in the manifest override or extend the built-ins.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path)
            .map_err(|e| PromptError::Load(format!("{}: {e}", manifest_path.display())))?;
        let manifest: ManifestFile =
            serde_json::from_str(&raw).map_err(|e| PromptError::Load(e.to_string()))?;
        let mut registry = Self::builtin();
        for entry in manifest.templates {
            let path = dir.join(&entry.file);
            let body = std::fs::read_to_string(&path)
                .map_err(|e| PromptError::Load(format!("{}: {e}", path.display())))?;
            registry.templates.insert(
                entry.name.clone(),
                PromptTemplate {
                    name: entry.name,
                    body,
                    required: entry.required,
                    optional: entry.optional,
                },
            );
        }
        Ok(registry)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.templates.keys().map(String::as_str).collect();
        names.sort();
        names
    }

    /// Render a template with the given bindings. Every required placeholder
    /// must be bound; optional placeholders without a binding have their
    /// block removed. Substitution is single-pass, so binding values are
    /// never re-scanned for placeholders.
    pub fn render(
        &self,
        name: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, PromptError> {
        let template = self.get(name)?;
        let mut body = template.body.clone();
        for opt in &template.optional {
            if !bindings.contains_key(opt) {
                body = drop_block(&body, opt);
            }
        }
        for req in &template.required {
            if !bindings.contains_key(req) {
                return Err(PromptError::MissingBinding {
                    template: name.to_string(),
                    name: req.clone(),
                });
            }
        }
        let mut out = String::with_capacity(body.len());
        let mut last = 0;
        for caps in placeholder_regex().captures_iter(&body) {
            let m = caps.get(0).unwrap();
            let key = &caps[1];
            let Some(value) = bindings.get(key) else {
                return Err(PromptError::MissingBinding {
                    template: name.to_string(),
                    name: key.to_string(),
                });
            };
            out.push_str(&body[last..m.start()]);
            out.push_str(value);
            last = m.end();
        }
        out.push_str(&body[last..]);
        Ok(out)
    }
}

/// Remove the line containing `{name}` and the header line directly above.
fn drop_block(body: &str, name: &str) -> String {
    let marker = format!("{{{name}}}");
    let lines: Vec<&str> = body.split_inclusive('\n').collect();
    let Some(pos) = lines.iter().position(|l| l.contains(&marker)) else {
        return body.to_string();
    };
    lines
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pos && (pos == 0 || *i != pos - 1))
        .map(|(_, l)| *l)
        .collect()
}

/// An option index chosen by the planning prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOption(u8);

impl ParsedOption {
    pub fn new(option: u8) -> Option<Self> {
        (1..=4).contains(&option).then_some(Self(option))
    }

    pub fn get(&self) -> u8 {
        self.0
    }
}

/// First standalone integer in 1..=4 found in the response.
pub fn parse_option(response: &str) -> Result<ParsedOption, PromptError> {
    let mut digits = String::new();
    for ch in response.chars().chain(std::iter::once(' ')) {
        if ch.is_ascii_digit() {
            digits.push(ch);
        } else if !digits.is_empty() {
            if let Some(opt) = digits.parse::<u8>().ok().and_then(ParsedOption::new) {
                return Ok(opt);
            }
            digits.clear();
        }
    }
    Err(PromptError::Unparseable)
}

const NULL_TRIM: &[char] = &[
    '"', '\'', '“', '”', '‘', '’', '`', '.', ',', ':', ';', '!', '?',
];

/// `None` iff the response, after trimming whitespace, quotes, and
/// punctuation, is the literal "null" (case-insensitive); otherwise the
/// whitespace-trimmed text.
pub fn parse_nullable(response: &str) -> Option<String> {
    let trimmed = response.trim();
    let core = trimmed.trim_matches(|c: char| c.is_whitespace() || NULL_TRIM.contains(&c));
    if core.eq_ignore_ascii_case("null") {
        None
    } else {
        Some(trimmed.to_string())
    }
}

fn sentence_id_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[s(\d+)\]").unwrap())
}

/// Sentence ids named in an extraction response, deduplicated in order and
/// capped at ten. `None` means the null marker; an empty vec means the
/// response named no identifiers.
pub fn parse_sentence_ids(response: &str) -> Option<Vec<usize>> {
    parse_nullable(response)?;
    let mut ids = Vec::new();
    for caps in sentence_id_regex().captures_iter(response) {
        if let Ok(id) = caps[1].parse::<usize>() {
            if !ids.contains(&id) {
                ids.push(id);
                if ids.len() == 10 {
                    break;
                }
            }
        }
    }
    Some(ids)
}

/// Neutral few-shot block for the option-selection prompt. Not tuned to any
/// benchmark; swap per task via a custom template directory.
pub const DEFAULT_PLANNING_EXAMPLES: &str = "\
Task: Find the date a specific event happened in a long report. Query: When was the merger announced? Option: [1]
Task: Write an overall summary of a long document. Option: [2]
Task: Count every entry in a long list that satisfies a condition. Query: How many entries mention rivers? Option: [3]
Task: Answer a question whose answer appears once in the text. Query: Who signed the letter? Option: [4]";

/// Neutral few-shot block for the query-rewrite prompt.
pub const DEFAULT_REWRITE_EXAMPLES: &str = "\
Query: How many entries mention rivers? Rewritten: Extract entries in the following list that mention rivers.
Query: Who signed the letter? Rewritten: null";
