//! System-prompt templates, loaded from a versioned TOML asset.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

const DEFAULT_PROMPTS: &str = include_str!("../assets/prompts.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read prompt file {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid prompt file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Deserialize)]
pub struct Prompts {
    pub version: u32,
    pub need_analysis: String,
    pub instantiate: String,
    pub agent: String,
    pub watcher_review: String,
    pub replacement: String,
    pub distill: String,
    pub diagnose: String,
    pub judge: String,
    pub minimal_team_hint: String,
    pub diverse_roles_hint: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self::from_toml(DEFAULT_PROMPTS).expect("bundled prompts parse")
    }
}

impl Prompts {
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let mut p: Prompts = toml::from_str(text).map_err(|e| PromptError::Parse(e.to_string()))?;
        for s in [
            &mut p.need_analysis,
            &mut p.instantiate,
            &mut p.agent,
            &mut p.watcher_review,
            &mut p.replacement,
            &mut p.distill,
            &mut p.diagnose,
            &mut p.judge,
            &mut p.minimal_team_hint,
            &mut p.diverse_roles_hint,
        ] {
            *s = s.trim().to_string();
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }
}
