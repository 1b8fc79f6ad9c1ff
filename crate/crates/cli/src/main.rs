//! `sopflow`: bootstrap stores, run queries, replay transcripts, inspect stores.
//!
//! Exit codes: 0 success, 1 execution failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use sopflow_core::config::{BackendKind, Config};
use sopflow_core::domain::{ExecutionTranscript, Query, TaskKind, Termination};
use sopflow_core::gateway::GatewayStats;
use sopflow_core::pipeline::{run_query, PipelineError, RunOptions, Runtime};
use sopflow_core::reflection::{bootstrap_repository, load_manifest, BootstrapStrategy, ReflectionError};
use sopflow_core::replay::validate_transcript;
use sopflow_core::repository::{PepStore, RetrievalMode, SopRepository};
use tracing_subscriber::EnvFilter;

mod inspect;

#[derive(Parser, Debug)]
#[command(name = "sopflow", version, about = "Retrieval-guided multi-agent runtime")]
struct Cli {
    /// Config file (TOML, or JSON by extension)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Store directory, overriding the config
    #[arg(long, global = true)]
    store: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Grow the SOP repository and experience pool from a task manifest
    Bootstrap {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "staged")]
        strategy: Strategy,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Answer one query with the full pipeline
    Run {
        query: String,
        #[arg(long, default_value = "other", value_parser = parse_task_kind)]
        task_kind: TaskKind,
        /// Where to write the JSONL transcript
        #[arg(long, default_value = "transcript.jsonl")]
        transcript: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RetrievalMode>,
        /// Instantiate without retrieved exemplars
        #[arg(long)]
        no_sop_rag: bool,
        /// Bind a stored case verbatim
        #[arg(long, value_name = "CASE_ID")]
        fixed_sop: Option<String>,
        #[arg(long)]
        no_watcher: bool,
        #[arg(long)]
        no_pep: bool,
        #[arg(long)]
        interval: Option<u32>,
        #[arg(long)]
        env_threshold: Option<u32>,
        #[arg(long)]
        cap: Option<u32>,
        #[arg(long)]
        max_rounds: Option<u32>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Re-check every invariant of a recorded transcript
    Replay { transcript: PathBuf },
    /// List or show store entries
    Inspect {
        /// Store directory; defaults to the configured store
        path: Option<PathBuf>,
        #[arg(long, value_name = "ID")]
        show: Option<String>,
    },
}

#[derive(clap::Args, Debug)]
struct ModelFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Scripted backend rule file
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Strategy {
    Staged,
    Plain,
}

fn parse_task_kind(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<RetrievalMode, String> {
    s.parse()
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

enum Failure {
    Usage(String),
    Execution(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Execution(_) => 1,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let started = Instant::now();
    let mut stats = GatewayStats::default();
    let result = dispatch(&cli, &mut stats);
    eprintln!(
        "time {:.3}s | gateway calls {} | tokens {} prompt, {} completion",
        started.elapsed().as_secs_f64(),
        stats.calls,
        stats.prompt_tokens,
        stats.completion_tokens
    );
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Execution(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: &Cli, stats: &mut GatewayStats) -> Outcome {
    match &cli.command {
        Command::Bootstrap { manifest, strategy, model } => {
            let mut config = load_config(cli)?;
            model.apply(&mut config);
            let rt = runtime(config)?;
            let outcome = bootstrap(&rt, manifest, *strategy);
            *stats = rt.stats();
            outcome
        }
        Command::Run {
            query,
            task_kind,
            transcript,
            k,
            lambda,
            mode,
            no_sop_rag,
            fixed_sop,
            no_watcher,
            no_pep,
            interval,
            env_threshold,
            cap,
            max_rounds,
            model,
        } => {
            let mut c = load_config(cli)?;
            model.apply(&mut c);
            set(&mut c.retrieval.k, *k);
            set(&mut c.retrieval.lambda, *lambda);
            set(&mut c.retrieval.mode, *mode);
            set(&mut c.engine.max_rounds, *max_rounds);
            set(&mut c.watcher.env_threshold, *env_threshold);
            set(&mut c.watcher.cap, *cap);
            if interval.is_some() {
                c.watcher.interval = *interval;
            }
            c.watcher.enabled &= !no_watcher;
            c.watcher.use_pep &= !no_pep;
            c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let mut opts = RunOptions::from_config(&c);
            opts.no_sop_rag = *no_sop_rag;
            opts.fixed_sop = fixed_sop.clone();
            let rt = runtime(c)?;
            let query = Query::new("cli", query.clone(), *task_kind);
            let outcome = run(&rt, &query, &opts, transcript);
            *stats = rt.stats();
            outcome
        }
        Command::Replay { transcript } => replay(transcript),
        Command::Inspect { path, show } => {
            let root = match path {
                Some(p) => p.clone(),
                None => load_config(cli)?.store.path,
            };
            inspect::inspect(&root, show.as_deref()).map_err(Failure::Usage)
        }
    }
}

impl ModelFlags {
    fn apply(&self, c: &mut Config) {
        set(&mut c.seed, self.seed);
        set(&mut c.backend, self.backend);
        if self.script.is_some() {
            c.script = self.script.clone();
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => Config::default(),
    };
    if let Some(store) = &cli.store {
        config.store.path = store.clone();
    }
    Ok(config)
}

fn runtime(config: Config) -> Result<Runtime, Failure> {
    Runtime::from_config(config).map_err(|e| Failure::Usage(e.to_string()))
}

fn open_stores(rt: &Runtime) -> Result<(SopRepository, PepStore), Failure> {
    rt.open_stores()
        .map_err(|e| Failure::Usage(format!("cannot open store {}: {e}", rt.config.store.path.display())))
}

fn bootstrap(rt: &Runtime, manifest: &Path, strategy: Strategy) -> Outcome {
    let tasks = load_manifest(manifest).map_err(|e| Failure::Usage(e.to_string()))?;
    let (mut repo, mut pep) = open_stores(rt)?;
    let strategy = match strategy {
        Strategy::Staged => BootstrapStrategy::Staged,
        Strategy::Plain => BootstrapStrategy::Plain,
    };
    let opts = RunOptions::from_config(&rt.config);
    let report = bootstrap_repository(rt, &tasks, &mut repo, &mut pep, &opts, strategy).map_err(|e| match e {
        ReflectionError::Manifest(m) => Failure::Usage(m),
        other => Failure::Execution(other.to_string()),
    })?;
    for t in &report.tasks {
        let status = if t.verdict.passed { "pass" } else { "fail" };
        eprintln!("{}: {status} after {} execution(s)", t.task_id, t.executions);
        if let Some(err) = &t.error {
            eprintln!("  {err}");
        }
    }
    println!("+{} SOP, +{} PEP", report.sop_added, report.pep_added);
    Ok(())
}

fn run(rt: &Runtime, query: &Query, opts: &RunOptions, transcript_path: &Path) -> Outcome {
    let (repo, pep) = open_stores(rt)?;
    let outcome = run_query(rt, &repo, &pep, query, opts).map_err(|e| match e {
        PipelineError::Config(_) | PipelineError::UnknownFixedSop(_) => Failure::Usage(e.to_string()),
        other => Failure::Execution(other.to_string()),
    })?;
    let t = &outcome.transcript;
    std::fs::write(transcript_path, t.to_jsonl())
        .map_err(|e| Failure::Execution(format!("cannot write {}: {e}", transcript_path.display())))?;
    eprintln!("transcript: {}", transcript_path.display());
    eprintln!(
        "rounds {} | actions {} | interventions {} | retrieved {}",
        t.rounds_used,
        t.actions,
        t.interventions().count(),
        outcome.retrieved.len()
    );
    match t.terminated_by {
        Termination::FinalAnswer => {
            println!("{}", t.final_answer.as_deref().unwrap_or_default());
            Ok(())
        }
        Termination::RoundCap => Err(Failure::Execution(format!(
            "no final answer within {} rounds",
            t.limits.max_rounds
        ))),
        Termination::FatalError => Err(Failure::Execution(
            t.error.clone().unwrap_or_else(|| "fatal execution error".into()),
        )),
    }
}

fn replay(path: &Path) -> Outcome {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let transcript =
        ExecutionTranscript::from_jsonl(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let report = validate_transcript(&transcript);
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failed().map(|r| r.invariant.name()).collect();
        Err(Failure::Execution(format!("invariants failed: {}", names.join(", "))))
    }
}
