//! Runtime configuration file (TOML, or JSON by extension).
//!
//! Every key is optional; missing keys take the built-in defaults. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EnginePolicy, ToolSettings, DEFAULT_MAX_ROUNDS};
use crate::gateway::{DEFAULT_DIMENSION, DEFAULT_TEMPERATURE};
use crate::instantiation::DEFAULT_REPAIR_BUDGET;
use crate::repository::{RetrievalConfig, RetrievalMode, DEFAULT_K, DEFAULT_LAMBDA, DEFAULT_PEP_K};
use crate::watcher::{InterventionPolicy, DEFAULT_CAP, DEFAULT_ENV_THRESHOLD};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(BackendKind::Scripted),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSection {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub embedding_model: Option<String>,
    pub timeout_secs: u64,
}

impl Default for HttpSection {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            embedding_model: None,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub dimension: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub lambda: f64,
    pub mode: RetrievalMode,
    pub pep_k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
            mode: RetrievalMode::Hybrid,
            pep_k: DEFAULT_PEP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstantiationSection {
    pub repair_budget: u32,
}

impl Default for InstantiationSection {
    fn default() -> Self {
        Self {
            repair_budget: DEFAULT_REPAIR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub max_rounds: u32,
    pub parallel: bool,
    pub bash_timeout_secs: u64,
    pub file_root: Option<PathBuf>,
    pub search_corpus: Option<PathBuf>,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            parallel: false,
            bash_timeout_secs: 10,
            file_root: None,
            search_corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatcherSection {
    pub enabled: bool,
    pub interval: Option<u32>,
    pub env_threshold: u32,
    pub cap: u32,
    pub use_pep: bool,
}

impl Default for WatcherSection {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: None,
            env_threshold: DEFAULT_ENV_THRESHOLD,
            cap: DEFAULT_CAP,
            use_pep: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    pub path: PathBuf,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("store"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendKind,
    pub temperature: f64,
    pub seed: u64,
    /// Scripted rule file (scripted backend).
    pub script: Option<PathBuf>,
    /// Append every model exchange to this JSONL file.
    pub prompt_log: Option<PathBuf>,
    /// Override of the bundled prompt templates.
    pub prompts: Option<PathBuf>,
    pub http: HttpSection,
    pub embedding: EmbeddingSection,
    pub retrieval: RetrievalSection,
    pub instantiation: InstantiationSection,
    pub engine: EngineSection,
    pub watcher: WatcherSection,
    pub store: StoreSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            script: None,
            prompt_log: None,
            prompts: None,
            http: HttpSection::default(),
            embedding: EmbeddingSection::default(),
            retrieval: RetrievalSection::default(),
            instantiation: InstantiationSection::default(),
            engine: EngineSection::default(),
            watcher: WatcherSection::default(),
            store: StoreSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Config = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut c = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve_paths(base);
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.script);
        resolve(base, &mut self.prompt_log);
        resolve(base, &mut self.prompts);
        resolve(base, &mut self.engine.file_root);
        resolve(base, &mut self.engine.search_corpus);
        if self.store.path.is_relative() {
            self.store.path = base.join(&self.store.path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.retrieval.lambda) {
            return bad(format!("retrieval.lambda {} outside [0, 1]", self.retrieval.lambda));
        }
        if self.retrieval.k == 0 || self.retrieval.pep_k == 0 {
            return bad("retrieval.k and retrieval.pep_k must be at least 1".into());
        }
        if self.embedding.dimension == 0 {
            return bad("embedding.dimension must be at least 1".into());
        }
        if self.engine.max_rounds == 0 {
            return bad("engine.max_rounds must be at least 1".into());
        }
        if self.watcher.interval == Some(0) || self.watcher.env_threshold == 0 {
            return bad("watcher.interval and watcher.env_threshold must be at least 1".into());
        }
        Ok(())
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            lambda: self.retrieval.lambda,
            k: self.retrieval.k,
            mode: self.retrieval.mode,
        }
    }

    pub fn engine_policy(&self) -> EnginePolicy {
        EnginePolicy {
            max_rounds: self.engine.max_rounds,
            parallel: self.engine.parallel,
            seed: self.seed,
        }
    }

    pub fn intervention_policy(&self) -> InterventionPolicy {
        InterventionPolicy {
            interval: self.watcher.interval,
            env_threshold: self.watcher.env_threshold,
            cap: self.watcher.cap,
        }
    }

    pub fn tool_settings(&self) -> ToolSettings {
        ToolSettings {
            bash_timeout: Some(Duration::from_secs(self.engine.bash_timeout_secs.max(1))),
            file_root: self.engine.file_root.clone(),
            search_corpus: self.engine.search_corpus.clone(),
        }
    }
}
