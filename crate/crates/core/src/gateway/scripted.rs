//! Deterministic backend that answers prompts from an ordered rule list.

use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatPrompt, GatewayError, ModelReply, Usage};

#[derive(Debug, Clone)]
pub enum Matcher {
    /// Every listed substring must occur in the rendered prompt.
    Contains(Vec<String>),
    Pattern(Regex),
}

impl Matcher {
    pub fn contains(s: impl Into<String>) -> Self {
        Matcher::Contains(vec![s.into()])
    }

    pub fn all<I, S>(parts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Matcher::Contains(parts.into_iter().map(Into::into).collect())
    }

    pub fn is_match(&self, rendered: &str) -> bool {
        match self {
            Matcher::Contains(parts) => parts.iter().all(|p| rendered.contains(p.as_str())),
            Matcher::Pattern(re) => re.is_match(rendered),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub response: String,
    pub max_uses: Option<u32>,
}

impl ScriptRule {
    pub fn new(matcher: Matcher, response: impl Into<String>) -> Self {
        Self {
            matcher,
            response: response.into(),
            max_uses: None,
        }
    }

    /// Shorthand for a substring rule.
    pub fn on(substring: impl Into<String>, response: impl Into<String>) -> Self {
        Self::new(Matcher::contains(substring), response)
    }

    pub fn once(self) -> Self {
        self.times(1)
    }

    pub fn times(mut self, n: u32) -> Self {
        self.max_uses = Some(n);
        self
    }
}

/// On-disk rule shape: `{"match": "..." | ["...", ...], "response": "...", "max_uses": 1}`
/// or `{"pattern": "<regex>", "response": "..."}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleFileEntry {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matches: Option<MatchField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_uses: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatchField {
    One(String),
    All(Vec<String>),
}

impl TryFrom<RuleFileEntry> for ScriptRule {
    type Error = GatewayError;

    fn try_from(e: RuleFileEntry) -> Result<Self, Self::Error> {
        let matcher = match (e.matches, e.pattern) {
            (Some(MatchField::One(s)), None) => Matcher::contains(s),
            (Some(MatchField::All(v)), None) => Matcher::Contains(v),
            (None, Some(p)) => Matcher::Pattern(
                Regex::new(&p).map_err(|err| GatewayError::Script(format!("bad pattern `{p}`: {err}")))?,
            ),
            _ => {
                return Err(GatewayError::Script(
                    "each rule needs exactly one of `match` or `pattern`".into(),
                ))
            }
        };
        Ok(ScriptRule {
            matcher,
            response: e.response,
            max_uses: e.max_uses,
        })
    }
}

impl From<&ScriptRule> for RuleFileEntry {
    fn from(r: &ScriptRule) -> Self {
        let (matches, pattern) = match &r.matcher {
            Matcher::Contains(v) if v.len() == 1 => (Some(MatchField::One(v[0].clone())), None),
            Matcher::Contains(v) => (Some(MatchField::All(v.clone())), None),
            Matcher::Pattern(re) => (None, Some(re.as_str().to_string())),
        };
        RuleFileEntry {
            matches,
            pattern,
            response: r.response.clone(),
            max_uses: r.max_uses,
        }
    }
}

pub fn rules_from_json(text: &str) -> Result<Vec<ScriptRule>, GatewayError> {
    let entries: Vec<RuleFileEntry> =
        serde_json::from_str(text).map_err(|e| GatewayError::Script(format!("invalid rule file: {e}")))?;
    entries.into_iter().map(ScriptRule::try_from).collect()
}

pub fn rules_to_json(rules: &[ScriptRule]) -> String {
    let entries: Vec<RuleFileEntry> = rules.iter().map(RuleFileEntry::from).collect();
    let mut s = serde_json::to_string_pretty(&entries).expect("rule entries serialize");
    s.push('\n');
    s
}

pub fn load_rules(path: &Path) -> Result<Vec<ScriptRule>, GatewayError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::Script(format!("cannot read {}: {e}", path.display())))?;
    rules_from_json(&text)
}

/// Rules are tried in declaration order; the first matching rule with budget
/// left answers. Budget decrements are serialized by a mutex, so the reply
/// is a pure function of the rules, the prompt, and prior use counts.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    uses: Mutex<Vec<u32>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let n = rules.len();
        Self {
            rules,
            uses: Mutex::new(vec![0; n]),
        }
    }

    pub fn use_counts(&self) -> Vec<u32> {
        self.uses.lock().expect("use counter poisoned").clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ModelReply, GatewayError> {
        let rendered = prompt.render();
        let mut uses = self.uses.lock().expect("use counter poisoned");
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.max_uses.is_some_and(|m| uses[i] >= m) {
                continue;
            }
            if rule.matcher.is_match(&rendered) {
                uses[i] += 1;
                return Ok(ModelReply {
                    usage: Usage::estimate(&rendered, &rule.response),
                    text: rule.response.clone(),
                    backend_tag: self.tag().to_string(),
                });
            }
        }
        Err(GatewayError::NoRuleMatched)
    }

    fn tag(&self) -> &str {
        "scripted"
    }
}
