//! Test-time pipeline: analyze, retrieve, instantiate, execute.

use std::collections::BTreeSet;
use std::time::Instant;

use thiserror::Error;

use crate::config::{BackendKind, Config, ConfigError};
use crate::domain::{ExecutionTranscript, NeedAnalysis, OperatingProcedure, PepRecord, Query};
use crate::engine::{Engine, EnginePolicy, Supervisor, ToolRegistry};
use crate::gateway::{load_rules, Gateway, GatewayStats, HttpBackend, HttpConfig, ScriptedBackend};
use crate::instantiation::{Exemplar, InstantiationError, InstantiationMode, Instantiator};
use crate::prompts::Prompts;
use crate::repository::{PepStore, RepositoryError, RetrievalConfig, ScoredCase, SopRepository};
use crate::watcher::{InterventionPolicy, Watcher};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown SOP case `{0}`")]
    UnknownFixedSop(String),
    #[error(transparent)]
    Instantiation(#[from] InstantiationError),
    #[error(transparent)]
    Repository(#[from] RepositoryError),
}

/// Shared services for one process: model gateway, prompt templates, tools.
pub struct Runtime {
    pub config: Config,
    pub gateway: Gateway,
    pub prompts: Prompts,
    pub registry: ToolRegistry,
}

impl Runtime {
    /// Builds the gateway, prompts and default tools described by `config`.
    pub fn from_config(config: Config) -> Result<Self, ConfigError> {
        let gateway = match config.backend {
            BackendKind::Scripted => {
                let path = config
                    .script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("the scripted backend needs a `script` rule file".into()))?;
                let rules = load_rules(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Gateway::new(Box::new(ScriptedBackend::new(rules)), config.embedding.dimension)
            }
            BackendKind::Http => {
                let api_key = match &config.http.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        ConfigError::Invalid(format!("environment variable `{var}` is not set"))
                    })?),
                    None => None,
                };
                let http = HttpConfig {
                    base_url: config.http.base_url.clone(),
                    model: config.http.model.clone(),
                    api_key,
                    embedding_model: config.http.embedding_model.clone(),
                    timeout: std::time::Duration::from_secs(config.http.timeout_secs.max(1)),
                    seed: Some(config.seed),
                    ..HttpConfig::default()
                };
                Gateway::new(Box::new(HttpBackend::new(http)), config.embedding.dimension)
            }
        }
        .with_temperature(config.temperature);
        let gateway = match &config.prompt_log {
            Some(path) => gateway.with_log_file(path).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?,
            None => gateway,
        };
        let registry = ToolRegistry::with_defaults(&config.tool_settings()).map_err(ConfigError::Invalid)?;
        Self::with_parts(config, gateway, registry)
    }

    /// Assembles a runtime from an existing gateway and registry.
    pub fn with_parts(config: Config, gateway: Gateway, registry: ToolRegistry) -> Result<Self, ConfigError> {
        let prompts = match &config.prompts {
            Some(path) => Prompts::load(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => Prompts::default(),
        };
        Ok(Self {
            config,
            gateway,
            prompts,
            registry,
        })
    }

    pub fn tool_names(&self) -> BTreeSet<String> {
        self.registry.names()
    }

    pub fn stats(&self) -> GatewayStats {
        self.gateway.stats()
    }

    pub fn open_stores(&self) -> Result<(SopRepository, PepStore), RepositoryError> {
        let root = &self.config.store.path;
        Ok((SopRepository::open(root, &self.gateway)?, PepStore::open(root, &self.gateway)?))
    }
}

/// Per-run switches, including the ablations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub retrieval: RetrievalConfig,
    pub pep_k: usize,
    /// Instantiate without retrieved exemplars.
    pub no_sop_rag: bool,
    /// Bind this stored case verbatim instead of instantiating.
    pub fixed_sop: Option<String>,
    /// `None` disables supervision.
    pub watcher: Option<InterventionPolicy>,
    pub use_pep: bool,
    pub engine: EnginePolicy,
    pub repair_budget: u32,
}

impl RunOptions {
    pub fn from_config(c: &Config) -> Self {
        Self {
            retrieval: c.retrieval_config(),
            pep_k: c.retrieval.pep_k,
            no_sop_rag: false,
            fixed_sop: None,
            watcher: c.watcher.enabled.then(|| c.intervention_policy()),
            use_pep: c.watcher.use_pep,
            engine: c.engine_policy(),
            repair_budget: c.instantiation.repair_budget,
        }
    }
}

impl Default for RunOptions {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub need: NeedAnalysis,
    pub retrieved: Vec<ScoredCase>,
    pub op: OperatingProcedure,
    pub repairs: u32,
    pub pep_refs: Vec<String>,
    pub transcript: ExecutionTranscript,
}

/// Executes `op`, attaching a watcher when enabled.
pub fn execute(rt: &Runtime, op: &OperatingProcedure, pep_hits: Vec<PepRecord>, opts: &RunOptions) -> ExecutionTranscript {
    let engine = Engine::new(&rt.gateway, &rt.registry, &rt.prompts, opts.engine);
    match opts.watcher {
        Some(policy) => {
            let mut watcher = Watcher::new(&rt.gateway, &rt.prompts, rt.tool_names(), policy, op.team().len(), pep_hits);
            engine.run(op, Some(&mut watcher as &mut dyn Supervisor))
        }
        None => engine.run(op, None),
    }
}

/// Experience records consulted by the watcher for `query`.
pub fn pep_hits(rt: &Runtime, pep: &PepStore, query: &Query, opts: &RunOptions) -> Result<Vec<PepRecord>, PipelineError> {
    if opts.watcher.is_none() || !opts.use_pep {
        return Ok(Vec::new());
    }
    Ok(pep
        .pep_lookup(query, opts.pep_k, &rt.gateway)?
        .into_iter()
        .map(|s| s.record)
        .collect())
}

/// Analysis, retrieval and instantiation, without execution.
pub fn prepare(
    rt: &Runtime,
    repo: &SopRepository,
    query: &Query,
    opts: &RunOptions,
    hint: Option<&str>,
) -> Result<(NeedAnalysis, Vec<ScoredCase>, OperatingProcedure, u32), PipelineError> {
    let tools = rt.tool_names();
    let inst = Instantiator::new(&rt.gateway, &rt.prompts, &tools).with_repair_budget(opts.repair_budget);
    if let Some(id) = &opts.fixed_sop {
        let case = repo.get(id).ok_or_else(|| PipelineError::UnknownFixedSop(id.clone()))?;
        let mode = InstantiationMode::FixedSop(Exemplar {
            case_id: case.id.clone(),
            sop: case.sop.clone(),
        });
        let out = inst.instantiate(query, &NeedAnalysis::default(), &[], &mode, hint)?;
        return Ok((NeedAnalysis::default(), Vec::new(), out.op, out.repairs));
    }

    let need = inst.analyze_need(query)?;
    let (retrieved, mode) = if opts.no_sop_rag {
        (Vec::new(), InstantiationMode::NoSopRag)
    } else {
        match repo.retrieve(query, &need, &opts.retrieval, &rt.gateway) {
            Ok(r) => (r, InstantiationMode::Normal),
            Err(RepositoryError::EmptyRepository) => (Vec::new(), InstantiationMode::NoSopRag),
            Err(e) => return Err(e.into()),
        }
    };
    let exemplars: Vec<Exemplar> = retrieved
        .iter()
        .map(|s| Exemplar {
            case_id: s.case.id.clone(),
            sop: s.case.sop.clone(),
        })
        .collect();
    let out = inst.instantiate(query, &need, &exemplars, &mode, hint)?;
    Ok((need, retrieved, out.op, out.repairs))
}

/// The full test-time path. Stores are only read.
pub fn run_query(
    rt: &Runtime,
    repo: &SopRepository,
    pep: &PepStore,
    query: &Query,
    opts: &RunOptions,
) -> Result<PipelineOutcome, PipelineError> {
    let started = Instant::now();
    let (need, retrieved, op, repairs) = prepare(rt, repo, query, opts, None)?;
    let hits = pep_hits(rt, pep, query, opts)?;
    let pep_refs = hits.iter().map(|r| r.id.clone()).collect();
    let mut transcript = execute(rt, &op, hits, opts);
    transcript.wall_time = started.elapsed();
    Ok(PipelineOutcome {
        need,
        retrieved,
        op,
        repairs,
        pep_refs,
        transcript,
    })
}
