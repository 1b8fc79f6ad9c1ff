//! Uniform access to a chat model and an embedding function.
//!
//! Every completion goes through [`Gateway`], which appends the exchange to
//! a prompt log. A log recorded against the HTTP backend can be converted
//! into scripted rules and replayed offline.

mod embed;
mod http;
mod scripted;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{cosine, hashing_embed, normalize, Embedder, HashingEmbedder, DEFAULT_DIMENSION};
pub use http::{HttpBackend, HttpConfig};
pub use scripted::{
    load_rules, rules_from_json, rules_to_json, MatchField, Matcher, RuleFileEntry, ScriptRule, ScriptedBackend,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no script rule matched the prompt")]
    NoRuleMatched,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("rate limited after {retries} retries")]
    RateLimit { retries: u32 },
    #[error("remote error {status} after {retries} retries: {body}")]
    Remote { status: u16, body: String, retries: u32 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("script error: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatPrompt {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: system.into(),
                },
                ChatMessage {
                    role: Role::User,
                    content: user.into(),
                },
            ],
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>) {
        self.messages.push(ChatMessage {
            role,
            content: content.into(),
        });
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidPrompt("prompt has no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidPrompt(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Flat rendering used for rule matching and logging.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push('[');
            out.push_str(m.role.as_str());
            out.push_str("]\n");
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    /// Whitespace token counts, used where the backend reports nothing.
    pub fn estimate(prompt: &str, reply: &str) -> Self {
        Self {
            prompt_tokens: prompt.split_whitespace().count() as u64,
            completion_tokens: reply.split_whitespace().count() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub text: String,
    pub usage: Usage,
    pub backend_tag: String,
}

/// A chat-completion provider.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ModelReply, GatewayError>;

    fn tag(&self) -> &str;

    /// Remote embedding, if the backend offers one. `None` selects the
    /// hashing embedder.
    fn embed(&self, _text: &str) -> Option<Result<Vec<f64>, GatewayError>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLogEntry {
    pub seq: u64,
    pub backend: String,
    pub prompt: ChatPrompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub usage: Usage,
}

struct PromptLog {
    entries: Vec<PromptLogEntry>,
    sink: Option<File>,
}

/// Converts recorded exchanges into single-use rules keyed on the full
/// rendered prompt, so a recorded run replays offline.
pub fn rules_from_log(entries: &[PromptLogEntry]) -> Vec<ScriptRule> {
    entries
        .iter()
        .filter_map(|e| {
            e.reply
                .as_ref()
                .map(|r| ScriptRule::on(e.prompt.render(), r.clone()).once())
        })
        .collect()
}

pub fn read_prompt_log(path: &Path) -> Result<Vec<PromptLogEntry>, GatewayError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::Script(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| GatewayError::Script(format!("bad log line: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    dimension: usize,
    temperature: f64,
    log: Mutex<PromptLog>,
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, dimension: usize) -> Self {
        Self {
            backend,
            dimension,
            temperature: DEFAULT_TEMPERATURE,
            log: Mutex::new(PromptLog {
                entries: Vec::new(),
                sink: None,
            }),
            calls: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
        }
    }

    pub fn scripted(rules: Vec<ScriptRule>) -> Self {
        Self::new(Box::new(ScriptedBackend::new(rules)), DEFAULT_DIMENSION)
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.dimension = dimension;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Appends every subsequent exchange to `path` as JSONL.
    pub fn with_log_file(self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log.lock().expect("prompt log poisoned").sink = Some(file);
        Ok(self)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn backend_tag(&self) -> &str {
        self.backend.tag()
    }

    /// Builds a two-message prompt at the gateway's configured temperature.
    pub fn prompt(&self, system: impl Into<String>, user: impl Into<String>) -> ChatPrompt {
        ChatPrompt::new(system, user).with_temperature(self.temperature)
    }

    pub fn complete(&self, prompt: &ChatPrompt) -> Result<ModelReply, GatewayError> {
        prompt.validate()?;
        let result = self.backend.complete(prompt);
        let seq = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let usage = result.as_ref().map(|r| r.usage).unwrap_or_default();
        self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::Relaxed);
        self.completion_tokens
            .fetch_add(usage.completion_tokens, Ordering::Relaxed);
        let entry = PromptLogEntry {
            seq,
            backend: self.backend.tag().to_string(),
            prompt: prompt.clone(),
            reply: result.as_ref().ok().map(|r| r.text.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
            usage,
        };
        let mut log = self.log.lock().expect("prompt log poisoned");
        if let Some(sink) = log.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            if let Err(e) = writeln!(sink, "{line}") {
                tracing::warn!(error = %e, "failed to append prompt log");
            }
        }
        log.entries.push(entry);
        result
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            calls: self.calls.load(Ordering::SeqCst),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn log_entries(&self) -> Vec<PromptLogEntry> {
        self.log.lock().expect("prompt log poisoned").entries.clone()
    }
}

impl Embedder for Gateway {
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        match self.backend.embed(text) {
            Some(result) => result,
            None => Ok(hashing_embed(text, self.dimension)),
        }
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}
