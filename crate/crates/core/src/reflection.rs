//! Training-time reflection: judging outcomes, distilling successful
//! procedures into the repository, and turning failures into experience
//! records and revised procedures.
//!
//! Nothing here runs at test time; [`crate::pipeline::run_query`] only reads
//! the stores.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    extract_json_object, ingest_sop, to_fixture_text, validate_sop, AgentExperience, Diagnostic, Evaluator,
    ExecutionTranscript, NeedAnalysis, OperatingProcedure, PepRecord, Query, SopCase, TaskKind, Termination, Verdict,
};
use crate::engine::tools::BashTool;
use crate::gateway::GatewayError;
use crate::instantiation::{join_diagnostics, Exemplar};
use crate::pipeline::{execute, pep_hits, prepare, PipelineError, RunOptions, Runtime};
use crate::repository::{PepStore, RepositoryError, SopRepository};
use crate::watcher::render_event;

pub const DEFAULT_MAX_ITERATIONS: u32 = 3;

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error("task has neither a checker nor a reference label")]
    NoEvaluator,
    #[error("model error: {0}")]
    Model(#[from] GatewayError),
    #[error("could not parse the model reply after {attempts} attempts: {reason}")]
    ParseFailed { attempts: u32, reason: String },
    #[error("distilled SOP failed validation after {attempts} attempts: {}", join_diagnostics(.diagnostics))]
    ValidationFailed {
        attempts: u32,
        diagnostics: Vec<Diagnostic>,
    },
    #[error(transparent)]
    Repository(#[from] RepositoryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid task manifest: {0}")]
    Manifest(String),
}

/// Executable predicate over a final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CheckerSpec {
    /// Runs `command` in a sandbox holding `answer.txt` (raw answer) and
    /// `answer.py` (first fenced code block, or the whole answer); passes when
    /// trimmed stdout equals `expected`.
    Command { command: String, expected: String },
    /// Case-insensitive substring test.
    Contains { answer_contains: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTask {
    pub query: Query,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<CheckerSpec>,
    /// Reference answer for the model judge, used only without a checker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub max_iterations: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    #[serde(default)]
    id: Option<String>,
    query: String,
    #[serde(default)]
    task_kind: TaskKind,
    #[serde(default)]
    checker: Option<CheckerSpec>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    max_iterations: Option<u32>,
}

/// Parses a training manifest: a JSON list of
/// `{query, task_kind, checker, label, max_iterations}` objects.
pub fn parse_manifest(text: &str) -> Result<Vec<TrainingTask>, ReflectionError> {
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(text).map_err(|e| ReflectionError::Manifest(e.to_string()))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            if e.query.trim().is_empty() {
                return Err(ReflectionError::Manifest(format!("task {} has an empty query", i + 1)));
            }
            if e.checker.is_none() && e.label.is_none() {
                return Err(ReflectionError::Manifest(format!("task {} has no checker and no label", i + 1)));
            }
            Ok(TrainingTask {
                query: Query::new(e.id.unwrap_or_else(|| format!("task-{}", i + 1)), e.query, e.task_kind),
                checker: e.checker,
                label: e.label,
                max_iterations: e.max_iterations.unwrap_or(DEFAULT_MAX_ITERATIONS).max(1),
            })
        })
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<TrainingTask>, ReflectionError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ReflectionError::Manifest(format!("cannot read {}: {e}", path.display())))?;
    parse_manifest(&text)
}

/// Contents of the first fenced code block, or the whole text.
pub fn strip_code_fence(text: &str) -> String {
    let Some(start) = text.find("```") else {
        return text.trim().to_string();
    };
    let after = &text[start + 3..];
    let body = after.split_once('\n').map_or("", |(_, rest)| rest);
    match body.find("```") {
        Some(end) => body[..end].to_string(),
        None => body.to_string(),
    }
}

fn run_checker(spec: &CheckerSpec, answer: &str, rt: &Runtime) -> Verdict {
    let verdict = |passed: bool, detail: String| Verdict {
        passed,
        detail,
        evaluator: Evaluator::Checker,
    };
    match spec {
        CheckerSpec::Contains { answer_contains } => {
            let passed = answer.to_lowercase().contains(&answer_contains.to_lowercase());
            let detail = if passed {
                "answer contains the expected text".to_string()
            } else {
                format!("answer does not contain `{answer_contains}`")
            };
            verdict(passed, detail)
        }
        CheckerSpec::Command { command, expected } => {
            let dir = match tempfile::tempdir() {
                Ok(d) => d,
                Err(e) => return verdict(false, format!("checker sandbox failed: {e}")),
            };
            let written = std::fs::write(dir.path().join("answer.txt"), answer)
                .and_then(|_| std::fs::write(dir.path().join("answer.py"), strip_code_fence(answer)));
            if let Err(e) = written {
                return verdict(false, format!("checker sandbox failed: {e}"));
            }
            let timeout = std::time::Duration::from_secs(rt.config.engine.bash_timeout_secs.max(1));
            match BashTool::new(timeout).run_in(dir.path(), command) {
                Ok(out) => {
                    let stdout = out.split("\n[stderr]\n").next().unwrap_or_default().trim();
                    if stdout == expected.trim() {
                        verdict(true, "checker passed".into())
                    } else {
                        verdict(false, format!("checker expected `{}`, got `{stdout}`", expected.trim()))
                    }
                }
                Err(e) => verdict(false, format!("checker failed: {e}")),
            }
        }
    }
}

/// Scores a run. The checker is authoritative; the model judge is used only
/// when the task carries a label and no checker.
pub fn judge(rt: &Runtime, transcript: &ExecutionTranscript, task: &TrainingTask) -> Result<Verdict, ReflectionError> {
    let evaluator = match (&task.checker, &task.label) {
        (Some(_), _) => Evaluator::Checker,
        (None, Some(_)) => Evaluator::ModelJudge,
        (None, None) => return Err(ReflectionError::NoEvaluator),
    };
    let answer = match (&transcript.terminated_by, &transcript.final_answer) {
        (Termination::FinalAnswer, Some(a)) => a,
        _ => {
            return Ok(Verdict {
                passed: false,
                detail: "no deliverable".into(),
                evaluator,
            })
        }
    };
    if let Some(spec) = &task.checker {
        return Ok(run_checker(spec, answer, rt));
    }
    let label = task.label.as_deref().unwrap_or_default();
    let user = format!(
        "[judge]\n## QUERY\n{}\n\n## REFERENCE LABEL\n{label}\n\n## FINAL ANSWER\n{answer}\n",
        task.query.text
    );
    let reply = rt.gateway.complete(&rt.gateway.prompt(rt.prompts.judge.clone(), user))?;
    let text = reply.text.trim();
    let (passed, detail) = if text.len() >= 4 && text[..4].eq_ignore_ascii_case("pass") {
        (true, "judged correct".to_string())
    } else if text.len() >= 4 && text[..4].eq_ignore_ascii_case("fail") {
        let reason = text[4..].trim_start_matches([':', ' ']).trim();
        (false, if reason.is_empty() { "judged incorrect".into() } else { reason.to_string() })
    } else {
        (false, format!("unrecognized judge reply: {text}"))
    };
    Ok(Verdict {
        passed,
        detail,
        evaluator: Evaluator::ModelJudge,
    })
}

fn ask_with_repair<T>(
    rt: &Runtime,
    system: &str,
    base: &str,
    mut accept: impl FnMut(&str) -> Result<T, String>,
) -> Result<T, (u32, String)> {
    let budget = rt.config.instantiation.repair_budget;
    let mut last = String::new();
    for attempt in 0..=budget {
        let mut user = base.to_string();
        if attempt > 0 {
            let _ = writeln!(user, "\n## PREVIOUS REPLY REJECTED\n{last}\nReply again with one corrected JSON object.");
        }
        let reply = rt
            .gateway
            .complete(&rt.gateway.prompt(system.to_string(), user))
            .map_err(|e| (attempt + 1, e.to_string()))?;
        match accept(&reply.text) {
            Ok(v) => return Ok(v),
            Err(e) => last = e,
        }
    }
    Err((budget + 1, last))
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Rewrites a successful procedure into a query-agnostic SOP case. The case
/// is returned, not stored.
pub fn distill_sop(
    rt: &Runtime,
    op: &OperatingProcedure,
    need: &NeedAnalysis,
    references: &[Exemplar],
) -> Result<SopCase, ReflectionError> {
    let mut base = String::from("[distill]\n## QUERY\n");
    let _ = writeln!(base, "{}", op.bound_query.text);
    if !need.is_empty() {
        let _ = writeln!(base, "\n## NEED ANALYSIS\n{}", need.text);
    }
    let _ = writeln!(base, "\n## OPERATING PROCEDURE\n{}", to_fixture_text(&op.sop));
    if !references.is_empty() {
        let _ = writeln!(base, "\n## REFERENCE SOPS");
        for r in references {
            let _ = writeln!(base, "### {}\n{}", r.case_id, to_fixture_text(&r.sop));
        }
    }
    let tools = rt.tool_names();
    let mut last_invalid = None;
    let result = ask_with_repair(rt, &rt.prompts.distill, &base, |reply| {
        let value = extract_json_object(reply).map_err(|e| e.to_string())?;
        let sop = ingest_sop(&value).map_err(|e| e.to_string())?;
        let diagnostics = validate_sop(&sop, &tools);
        if diagnostics.is_empty() {
            last_invalid = None;
            Ok(sop)
        } else {
            let msg = join_diagnostics(&diagnostics);
            last_invalid = Some(diagnostics);
            Err(msg)
        }
    });
    match result {
        Ok(sop) => Ok(SopCase {
            id: String::new(),
            query: op.bound_query.clone(),
            need: need.clone(),
            sop,
            query_embedding: None,
            need_embedding: None,
            created_at: timestamp(),
        }),
        Err((attempts, reason)) => Err(match last_invalid {
            Some(diagnostics) => ReflectionError::ValidationFailed { attempts, diagnostics },
            None => ReflectionError::ParseFailed { attempts, reason },
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnosis {
    pub failure_cause: String,
    pub experiences: Vec<AgentExperience>,
    pub revised_op: OperatingProcedure,
}

fn parse_diagnosis(reply: &str, failed: &OperatingProcedure, tools: &std::collections::BTreeSet<String>) -> Result<Diagnosis, String> {
    let v = extract_json_object(reply).map_err(|e| e.to_string())?;
    let text = |v: &Value, k: &str| -> Result<String, String> {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .ok_or_else(|| format!("`{k}` must be a non-empty string"))
    };
    let failure_cause = text(&v, "failure_cause")?;
    let list = v
        .get("experiences")
        .and_then(Value::as_array)
        .ok_or("`experiences` must be a list")?;
    if list.is_empty() {
        return Err("`experiences` must name at least one agent".into());
    }
    let mut experiences = Vec::with_capacity(list.len());
    for (i, e) in list.iter().enumerate() {
        let agent = text(e, "agent").map_err(|m| format!("experiences[{i}]: {m}"))?;
        if !failed.team().contains(&agent) {
            return Err(format!("experiences[{i}]: `{agent}` is not in the failing team"));
        }
        experiences.push(AgentExperience {
            agent,
            error_attribution: text(e, "error_attribution").map_err(|m| format!("experiences[{i}]: {m}"))?,
            improvement_strategy: text(e, "improvement_strategy").map_err(|m| format!("experiences[{i}]: {m}"))?,
        });
    }
    let revised = ["revised_op", "revised_sop", "op"]
        .iter()
        .find_map(|k| v.get(*k))
        .ok_or("missing `revised_op`")?;
    let revised = match revised {
        Value::String(s) => extract_json_object(s).map_err(|e| format!("revised_op: {e}"))?,
        other => other.clone(),
    };
    let sop = ingest_sop(&revised).map_err(|e| format!("revised_op: {e}"))?;
    let diagnostics = validate_sop(&sop, tools);
    if !diagnostics.is_empty() {
        return Err(format!("revised_op: {}", join_diagnostics(&diagnostics)));
    }
    Ok(Diagnosis {
        failure_cause,
        experiences,
        revised_op: OperatingProcedure::bind(sop, failed.bound_query.clone(), failed.provenance.clone()),
    })
}

/// Attributes a failure to agents and proposes a revised procedure, using
/// the full message and tool trajectory.
pub fn diagnose(rt: &Runtime, transcript: &ExecutionTranscript, verdict: &Verdict) -> Result<Diagnosis, ReflectionError> {
    let failed = transcript.effective_op();
    let mut base = String::from("[diagnose]\n## QUERY\n");
    let _ = writeln!(base, "{}", failed.bound_query.text);
    let _ = writeln!(base, "\n## EVALUATION\n{}", verdict.detail);
    let _ = writeln!(base, "\n## OPERATING PROCEDURE\n{}", to_fixture_text(&failed.sop));
    let _ = writeln!(base, "\n## TRAJECTORY");
    for e in &transcript.events {
        render_event(&mut base, e);
    }
    let termination = serde_json::to_value(transcript.terminated_by).expect("termination serializes");
    let _ = writeln!(base, "\n## OUTCOME\nterminated by {}", termination.as_str().unwrap_or_default());
    if let Some(a) = &transcript.final_answer {
        let _ = writeln!(base, "final answer:\n{a}");
    }
    let tools = rt.tool_names();
    ask_with_repair(rt, &rt.prompts.diagnose, &base, |reply| parse_diagnosis(reply, &failed, &tools))
        .map_err(|(attempts, reason)| ReflectionError::ParseFailed { attempts, reason })
}

#[derive(Debug, Clone)]
pub struct LoopReport {
    pub task_id: String,
    pub verdict: Verdict,
    pub executions: u32,
    pub sop_added: Option<String>,
    pub pep_added: Vec<String>,
    pub transcripts: Vec<ExecutionTranscript>,
    /// Why the loop stopped early or could not store its result.
    pub error: Option<String>,
}

/// Run, judge, then distill on success or diagnose and retry on failure, for
/// at most `task.max_iterations` executions.
pub fn reflective_loop(
    rt: &Runtime,
    task: &TrainingTask,
    repo: &mut SopRepository,
    pep: &mut PepStore,
    opts: &RunOptions,
    hint: Option<&str>,
) -> Result<LoopReport, ReflectionError> {
    if task.checker.is_none() && task.label.is_none() {
        return Err(ReflectionError::NoEvaluator);
    }
    let tools = rt.tool_names();
    let (need, retrieved, mut op, _) = prepare(rt, repo, &task.query, opts, hint)?;
    let references: Vec<Exemplar> = retrieved
        .iter()
        .map(|s| Exemplar {
            case_id: s.case.id.clone(),
            sop: s.case.sop.clone(),
        })
        .collect();

    let mut report = LoopReport {
        task_id: task.query.id.clone(),
        verdict: Verdict {
            passed: false,
            detail: "not executed".into(),
            evaluator: Evaluator::Checker,
        },
        executions: 0,
        sop_added: None,
        pep_added: Vec::new(),
        transcripts: Vec::new(),
        error: None,
    };
    for _ in 0..task.max_iterations.max(1) {
        let hits = pep_hits(rt, pep, &task.query, opts)?;
        let transcript = execute(rt, &op, hits, opts);
        report.executions += 1;
        let verdict = judge(rt, &transcript, task)?;
        report.verdict = verdict.clone();
        if verdict.passed {
            let passed_op = transcript.effective_op();
            report.transcripts.push(transcript);
            match distill_sop(rt, &passed_op, &need, &references) {
                Ok(case) => report.sop_added = Some(repo.add_case(case, &tools, &rt.gateway)?),
                Err(e) => report.error = Some(format!("distillation failed: {e}")),
            }
            return Ok(report);
        }
        let diagnosis = diagnose(rt, &transcript, &verdict);
        report.transcripts.push(transcript);
        let diagnosis = match diagnosis {
            Ok(d) => d,
            Err(e) => {
                report.error = Some(format!("diagnosis failed: {e}"));
                return Ok(report);
            }
        };
        let id = pep.pep_add(
            PepRecord {
                id: String::new(),
                query: task.query.clone(),
                failure_cause: diagnosis.failure_cause,
                experiences: diagnosis.experiences,
                query_embedding: None,
            },
            &rt.gateway,
        )?;
        report.pep_added.push(id);
        op = diagnosis.revised_op;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapStrategy {
    /// Minimal teams for coding tasks, diverse roles for tool-rich tasks.
    #[default]
    Staged,
    /// No team-design hint.
    Plain,
}

pub fn team_hint(rt: &Runtime, kind: TaskKind, strategy: BootstrapStrategy) -> Option<&str> {
    match (strategy, kind) {
        (BootstrapStrategy::Plain, _) => None,
        (_, TaskKind::Coding) => Some(&rt.prompts.minimal_team_hint),
        (_, k) if k.is_tool_rich() => Some(&rt.prompts.diverse_roles_hint),
        _ => None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct BootstrapReport {
    pub tasks: Vec<LoopReport>,
    pub sop_added: usize,
    pub pep_added: usize,
}

/// Processes every task through [`reflective_loop`], growing the stores.
pub fn bootstrap_repository(
    rt: &Runtime,
    tasks: &[TrainingTask],
    repo: &mut SopRepository,
    pep: &mut PepStore,
    opts: &RunOptions,
    strategy: BootstrapStrategy,
) -> Result<BootstrapReport, ReflectionError> {
    let mut out = BootstrapReport::default();
    for task in tasks {
        let hint = team_hint(rt, task.query.task_kind, strategy);
        let report = reflective_loop(rt, task, repo, pep, opts, hint)?;
        out.sop_added += usize::from(report.sop_added.is_some());
        out.pep_added += report.pep_added.len();
        out.tasks.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fence_stripping() {
        assert_eq!(strip_code_fence("```python\ndef f():\n    return 1\n```\nDone."), "def f():\n    return 1\n");
        assert_eq!(strip_code_fence("  x = 1  "), "x = 1");
    }

    #[test]
    fn manifest_parsing() {
        let tasks = parse_manifest(
            r#"[{"query": "add two numbers", "task_kind": "coding",
                 "checker": {"command": "python3 -c 'from answer import add; print(add(2, 3))'", "expected": "5"}},
                {"query": "capital of France?", "task_kind": "qa", "label": "Paris", "max_iterations": 2}]"#,
        )
        .unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].query.id, "task-1");
        assert_eq!(tasks[0].max_iterations, 3);
        assert!(matches!(tasks[0].checker, Some(CheckerSpec::Command { .. })));
        assert_eq!(tasks[1].label.as_deref(), Some("Paris"));
        assert!(parse_manifest("[]").unwrap().is_empty());
        assert!(parse_manifest(r#"[{"query": "x"}]"#).is_err());
        assert!(parse_manifest("{").is_err());
    }
}
