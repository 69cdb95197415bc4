//! Scripted mock backend: ordered (matcher, template) rules for offline,
//! deterministic tests and dry runs.

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendReply, CompletionRequest, GatewayError};

/// How a rule matches the incoming prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MatcherSpec {
    /// Matches every prompt; required as the final rule.
    Any,
    /// Matches when the prompt contains the literal substring.
    Substring { value: String },
    /// Matches when the anchored pattern covers the whole prompt.
    Pattern { value: String },
}

/// One (matcher, template) pair. Templates may interpolate `$0` (the whole
/// prompt) and, for pattern rules, `$1`..`$n` capture groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub matcher: MatcherSpec,
    pub template: String,
}

impl MockRule {
    pub fn catch_all(template: impl Into<String>) -> Self {
        Self {
            matcher: MatcherSpec::Any,
            template: template.into(),
        }
    }

    pub fn substring(value: impl Into<String>, template: impl Into<String>) -> Self {
        Self {
            matcher: MatcherSpec::Substring {
                value: value.into(),
            },
            template: template.into(),
        }
    }

    pub fn pattern(value: impl Into<String>, template: impl Into<String>) -> Self {
        Self {
            matcher: MatcherSpec::Pattern {
                value: value.into(),
            },
            template: template.into(),
        }
    }
}

#[derive(Debug)]
struct CompiledRule {
    rule: MockRule,
    regex: Option<Regex>,
}

/// First-matching-rule-wins scripted backend.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<CompiledRule>,
}

/// Compile a rule set. The last rule must be a catch-all so the backend is
/// total over prompts.
pub fn script_mock(rules: Vec<MockRule>) -> Result<ScriptedBackend, GatewayError> {
    if rules.is_empty() {
        return Err(GatewayError::InvalidRuleSet("no rules given".to_string()));
    }
    if rules.last().map(|r| &r.matcher) != Some(&MatcherSpec::Any) {
        return Err(GatewayError::InvalidRuleSet(
            "last rule must be a catch-all".to_string(),
        ));
    }
    let mut compiled = Vec::with_capacity(rules.len());
    for rule in rules {
        let regex = match &rule.matcher {
            MatcherSpec::Pattern { value } => {
                let anchored = format!("(?s)^(?:{value})$");
                Some(Regex::new(&anchored).map_err(|e| {
                    GatewayError::InvalidRuleSet(format!("bad pattern {value:?}: {e}"))
                })?)
            }
            _ => None,
        };
        compiled.push(CompiledRule { rule, regex });
    }
    Ok(ScriptedBackend { rules: compiled })
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let prompt = &request.prompt;
        for compiled in &self.rules {
            match &compiled.rule.matcher {
                MatcherSpec::Any => {
                    let text = compiled.rule.template.replace("$0", prompt);
                    return Ok(BackendReply::text(text));
                }
                MatcherSpec::Substring { value } => {
                    if prompt.contains(value.as_str()) {
                        let text = compiled.rule.template.replace("$0", prompt);
                        return Ok(BackendReply::text(text));
                    }
                }
                MatcherSpec::Pattern { .. } => {
                    let regex = compiled.regex.as_ref().expect("pattern rules are compiled");
                    if let Some(caps) = regex.captures(prompt) {
                        let mut text = String::new();
                        caps.expand(&compiled.rule.template, &mut text);
                        return Ok(BackendReply::text(text));
                    }
                }
            }
        }
        unreachable!("rule set ends with a catch-all");
    }
}
