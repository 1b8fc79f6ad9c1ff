//! Python bindings: run queries, bootstrap stores and replay transcripts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sopflow_core::config::Config;
use sopflow_core::domain::{parse_sop_text, to_fixture_text, ExecutionTranscript, Query, TaskKind, Termination};
use sopflow_core::gateway;
use sopflow_core::pipeline::{self, RunOptions};
use sopflow_core::reflection::{self, BootstrapStrategy};
use sopflow_core::replay;
use sopflow_core::repository::{self, SopRepository};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A recorded execution.
#[pyclass(module = "sopflow", frozen)]
struct Transcript {
    inner: ExecutionTranscript,
}

#[pymethods]
impl Transcript {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        ExecutionTranscript::from_jsonl(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    #[getter]
    fn terminated_by(&self) -> &'static str {
        match self.inner.terminated_by {
            Termination::FinalAnswer => "final_answer",
            Termination::RoundCap => "round_cap",
            Termination::FatalError => "fatal_error",
        }
    }

    #[getter]
    fn final_answer(&self) -> Option<String> {
        self.inner.final_answer.clone()
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.inner.error.clone()
    }

    #[getter]
    fn rounds_used(&self) -> u32 {
        self.inner.rounds_used
    }

    #[getter]
    fn actions(&self) -> u64 {
        self.inner.actions
    }

    #[getter]
    fn team(&self) -> Vec<String> {
        self.inner.op.team().to_vec()
    }

    #[getter]
    fn replacements(&self) -> usize {
        self.inner
            .interventions()
            .filter(|i| i.kind == sopflow_core::domain::InterventionKind::Replacement)
            .count()
    }

    #[getter]
    fn interventions(&self) -> usize {
        self.inner.interventions().count()
    }

    /// Invariant name to violations; an empty list means the check passed.
    fn replay(&self) -> BTreeMap<&'static str, Vec<String>> {
        replay_report(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Transcript(terminated_by={:?}, rounds_used={}, actions={})",
            self.terminated_by(),
            self.inner.rounds_used,
            self.inner.actions
        )
    }
}

fn replay_report(t: &ExecutionTranscript) -> BTreeMap<&'static str, Vec<String>> {
    replay::validate_transcript(t)
        .results
        .into_iter()
        .map(|r| (r.invariant.name(), r.violations))
        .collect()
}

/// Model gateway, prompts, tools and store location loaded from a config.
#[pyclass(module = "sopflow", unsendable)]
struct Runtime {
    inner: pipeline::Runtime,
}

#[pymethods]
impl Runtime {
    #[new]
    #[pyo3(signature = (config=None, *, script=None, store=None, seed=None))]
    fn new(config: Option<PathBuf>, script: Option<PathBuf>, store: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let mut c = match config {
            Some(path) => Config::load(&path).map_err(value_err)?,
            None => Config::default(),
        };
        if script.is_some() {
            c.script = script;
        }
        if let Some(store) = store {
            c.store.path = store;
        }
        if let Some(seed) = seed {
            c.seed = seed;
        }
        let inner = pipeline::Runtime::from_config(c).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Runs the full pipeline against the configured stores.
    #[pyo3(signature = (query, task_kind="other", *, watcher=true, use_pep=true, no_sop_rag=false, fixed_sop=None, max_rounds=None))]
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        query: &str,
        task_kind: &str,
        watcher: bool,
        use_pep: bool,
        no_sop_rag: bool,
        fixed_sop: Option<String>,
        max_rounds: Option<u32>,
    ) -> PyResult<Transcript> {
        let kind: TaskKind = task_kind.parse().map_err(PyValueError::new_err)?;
        let mut opts = RunOptions::from_config(&self.inner.config);
        if !watcher {
            opts.watcher = None;
        }
        opts.use_pep &= use_pep;
        opts.no_sop_rag = no_sop_rag;
        opts.fixed_sop = fixed_sop;
        if let Some(n) = max_rounds {
            if n == 0 {
                return Err(PyValueError::new_err("max_rounds must be at least 1"));
            }
            opts.engine.max_rounds = n;
        }
        let (repo, pep) = self.inner.open_stores().map_err(value_err)?;
        let query = Query::new("python", query, kind);
        match pipeline::run_query(&self.inner, &repo, &pep, &query, &opts) {
            Ok(out) => Ok(Transcript { inner: out.transcript }),
            Err(e @ pipeline::PipelineError::UnknownFixedSop(_)) => Err(value_err(e)),
            Err(e) => Err(runtime_err(e)),
        }
    }

    /// Processes a task manifest; returns `(sop_added, pep_added)`.
    #[pyo3(signature = (manifest, staged=true))]
    fn bootstrap(&self, manifest: PathBuf, staged: bool) -> PyResult<(usize, usize)> {
        let tasks = reflection::load_manifest(&manifest).map_err(value_err)?;
        let (mut repo, mut pep) = self.inner.open_stores().map_err(value_err)?;
        let strategy = if staged { BootstrapStrategy::Staged } else { BootstrapStrategy::Plain };
        let opts = RunOptions::from_config(&self.inner.config);
        let report = reflection::bootstrap_repository(&self.inner, &tasks, &mut repo, &mut pep, &opts, strategy)
            .map_err(runtime_err)?;
        Ok((report.sop_added, report.pep_added))
    }

    /// Gateway usage so far: calls, prompt and completion tokens.
    fn stats(&self) -> BTreeMap<&'static str, u64> {
        let s = self.inner.stats();
        BTreeMap::from([
            ("calls", s.calls),
            ("prompt_tokens", s.prompt_tokens),
            ("completion_tokens", s.completion_tokens),
        ])
    }
}

/// Validates a JSONL transcript; invariant name to violations.
#[pyfunction]
fn validate_transcript(jsonl: &str) -> PyResult<BTreeMap<&'static str, Vec<String>>> {
    let t = ExecutionTranscript::from_jsonl(jsonl).map_err(value_err)?;
    Ok(replay_report(&t))
}

#[pyfunction]
fn hybrid_score(sim_q: f64, sim_n: f64, lam: f64) -> PyResult<f64> {
    repository::hybrid_score(sim_q, sim_n, lam).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (text, dimension=gateway::DEFAULT_DIMENSION))]
fn hashing_embed(text: &str, dimension: usize) -> PyResult<Vec<f64>> {
    if dimension == 0 {
        return Err(PyValueError::new_err("dimension must be at least 1"));
    }
    Ok(gateway::hashing_embed(text, dimension))
}

/// Parses an SOP document and returns it in canonical form.
#[pyfunction]
fn normalize_sop(text: &str) -> PyResult<String> {
    parse_sop_text(text).map(|s| to_fixture_text(&s)).map_err(value_err)
}

/// `(id, team size, tools, query)`.
type CaseRow = (String, usize, Vec<String>, String);

/// One row per case in a store.
#[pyfunction]
fn list_cases(store: PathBuf) -> PyResult<Vec<CaseRow>> {
    let repo = SopRepository::open_read_only(&store).map_err(value_err)?;
    Ok(repo
        .cases()
        .iter()
        .map(|c| (c.id.clone(), c.sop.team_size(), c.sop.tools(), c.query.text.clone()))
        .collect())
}

#[pymodule]
fn sopflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Runtime>()?;
    m.add_class::<Transcript>()?;
    m.add_function(wrap_pyfunction!(validate_transcript, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_score, m)?)?;
    m.add_function(wrap_pyfunction!(hashing_embed, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_sop, m)?)?;
    m.add_function(wrap_pyfunction!(list_cases, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
