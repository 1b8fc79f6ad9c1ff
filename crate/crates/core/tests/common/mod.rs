#![allow(dead_code)]

pub mod fuzz;

use sopflow_core::config::Config;
use sopflow_core::domain::ExecutionTranscript;
use sopflow_core::engine::ToolRegistry;
use sopflow_core::gateway::{Gateway, ScriptRule};
use sopflow_core::pipeline::{run_query, PipelineOutcome, RunOptions, Runtime};
use sopflow_core::repository::{PepStore, SopRepository};
use sopflow_core::scenarios::Scenario;
use tempfile::TempDir;

pub struct Harness {
    pub rt: Runtime,
    pub dir: TempDir,
}

pub fn harness(rules: Vec<ScriptRule>, corpus: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut config = Config::default();
    if let Some(c) = corpus {
        let path = dir.path().join("corpus.json");
        std::fs::write(&path, c).unwrap();
        config.engine.search_corpus = Some(path);
    }
    config.store.path = dir.path().join("store");
    let registry = ToolRegistry::with_defaults(&config.tool_settings()).unwrap();
    let gateway = Gateway::scripted(rules);
    let rt = Runtime::with_parts(config, gateway, registry).unwrap();
    Harness { rt, dir }
}

pub fn scenario_harness(sc: &Scenario) -> Harness {
    harness(sc.rules.clone(), sc.search_corpus.as_deref())
}

pub fn options(watcher: bool) -> RunOptions {
    let mut opts = RunOptions::default();
    if !watcher {
        opts.watcher = None;
    }
    opts
}

/// Runs the scenario query through the full pipeline on empty in-memory stores.
pub fn run_scenario(sc: &Scenario, watcher: bool) -> (PipelineOutcome, Harness) {
    let h = scenario_harness(sc);
    let d = h.rt.config.embedding.dimension;
    let out = run_query(&h.rt, &SopRepository::in_memory(d), &PepStore::in_memory(d), &sc.query, &options(watcher)).unwrap();
    (out, h)
}

pub fn summary(t: &ExecutionTranscript) -> String {
    format!(
        "terminated_by={:?} rounds={} actions={} interventions={} error={:?}",
        t.terminated_by,
        t.rounds_used,
        t.actions,
        t.interventions().count(),
        t.error
    )
}
