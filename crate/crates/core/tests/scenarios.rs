mod common;

use std::path::PathBuf;

use sopflow_core::domain::{InterventionKind, MessageKind, Node, Termination};
use sopflow_core::gateway::{Matcher, ScriptRule};
use sopflow_core::reflection::{
    diagnose, judge, parse_manifest, reflective_loop, CheckerSpec, ReflectionError, TrainingTask,
};
use sopflow_core::repository::{PepStore, SopRepository};
use sopflow_core::scenarios;

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Rewrite with `UPDATE_FIXTURES=1 cargo test -p sopflow-core --test scenarios`.
#[test]
fn fixture_files_are_current() {
    let root = fixtures_dir();
    let update = std::env::var_os("UPDATE_FIXTURES").is_some();
    let mut stale = Vec::new();
    for (rel, contents) in scenarios::fixture_files() {
        let path = root.join(&rel);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &contents).unwrap();
        } else if std::fs::read_to_string(&path).ok().as_deref() != Some(contents.as_str()) {
            stale.push(rel);
        }
    }
    assert!(stale.is_empty(), "stale fixtures {stale:?}; rerun with UPDATE_FIXTURES=1");
}

#[test]
fn fixture_manifests_parse() {
    for dir in ["web_search", "empty_function_attack", "bootstrap"] {
        let text = std::fs::read_to_string(fixtures_dir().join(dir).join("manifest.json")).unwrap();
        assert!(!parse_manifest(&text).unwrap().is_empty());
    }
}

#[test]
fn web_search_takes_four_rounds() {
    let (out, _h) = common::run_scenario(&scenarios::web_search(), true);
    let t = &out.transcript;
    assert_eq!(t.terminated_by, Termination::FinalAnswer);
    assert_eq!(t.rounds_used, 4);
    assert_eq!(t.final_agent.as_deref(), Some("Summarizer"));
    let calls: Vec<_> = t.tool_calls().collect();
    assert_eq!(calls.len(), 1);
    assert_eq!(calls[0].tool, "GOOGLE Search");
    assert!(calls[0].observation.contains("Lusail Stadium"));
    assert!(out.retrieved.is_empty());
    assert!(out.op.provenance.is_empty());
}

#[test]
fn attack_replacement_reposts_the_task() {
    let (out, _h) = common::run_scenario(&scenarios::empty_function_attack(), true);
    let t = &out.transcript;
    let replacement = t.interventions().find(|i| i.kind == InterventionKind::Replacement).unwrap();
    assert_eq!(replacement.target, "Programming Expert");
    assert_eq!(replacement.generation, Some(1));
    assert_eq!(replacement.round, 1);
    let repost = t.messages().find(|m| m.reposted).unwrap();
    assert_eq!(repost.sender, Node::User);
    assert_eq!(repost.recipient_gen, 1);
    assert!(t.messages().all(|m| !m.content.contains("    pass")));
    assert!(t
        .effective_op()
        .agent("Programming Expert")
        .unwrap()
        .instruction
        .contains("full function body"));
}

#[test]
fn unsupervised_attack_hits_the_round_cap() {
    let sc = scenarios::empty_function_attack();
    let (out, h) = common::run_scenario(&sc, false);
    assert_eq!(out.transcript.terminated_by, Termination::RoundCap);
    let verdict = judge(&h.rt, &out.transcript, &sc.task()).unwrap();
    assert!(!verdict.passed);
    assert_eq!(verdict.detail, "no deliverable");
}

#[test]
fn bootstrap_failure_produces_experience_and_revision() {
    let (tasks, rules) = scenarios::bootstrap();
    let h = common::harness(rules, None);
    let d = h.rt.config.embedding.dimension;
    let (mut repo, mut pep) = (SopRepository::in_memory(d), PepStore::in_memory(d));
    let task = tasks.iter().find(|t| t.query.id == "moon-landing").unwrap();
    let report = reflective_loop(&h.rt, task, &mut repo, &mut pep, &common::options(true), None).unwrap();
    assert_eq!(report.executions, 2);
    assert!(report.verdict.passed);
    assert_eq!(report.pep_added.len(), 1);
    let record = pep.get(&report.pep_added[0]).unwrap();
    assert_eq!(record.experiences[0].agent, "Solver");
    let stored = repo.get(report.sop_added.as_deref().unwrap()).unwrap();
    assert!(stored.sop.agents[0].instruction.contains("check it against the request"));
    assert_eq!(stored.query.id, "moon-landing");
    let first = &report.transcripts[0];
    assert_eq!(first.final_answer.as_deref(), Some("Apollo 11 landed on the Moon in 1968."));
}

#[test]
fn exhausted_iterations_keep_the_last_failure() {
    let (mut tasks, rules) = scenarios::bootstrap();
    let h = common::harness(rules, None);
    let d = h.rt.config.embedding.dimension;
    let (mut repo, mut pep) = (SopRepository::in_memory(d), PepStore::in_memory(d));
    let mut task = tasks.remove(3);
    task.max_iterations = 1;
    let report = reflective_loop(&h.rt, &task, &mut repo, &mut pep, &common::options(true), None).unwrap();
    assert!(!report.verdict.passed);
    assert_eq!(report.executions, 1);
    assert_eq!(report.pep_added.len(), 1);
    assert!(report.sop_added.is_none());
    assert!(repo.is_empty());
}

fn rule(parts: &[&str], response: &str) -> ScriptRule {
    ScriptRule::new(Matcher::all(parts.iter().copied()), response)
}

#[test]
fn model_judge_and_missing_evaluator() {
    let sc = scenarios::web_search();
    let mut rules = sc.rules.clone();
    rules.push(rule(&["[judge]", "Lusail"], "PASS"));
    let h = common::harness(rules, sc.search_corpus.as_deref());
    let d = h.rt.config.embedding.dimension;
    let out = sopflow_core::pipeline::run_query(
        &h.rt,
        &SopRepository::in_memory(d),
        &PepStore::in_memory(d),
        &sc.query,
        &common::options(true),
    )
    .unwrap();
    let labelled = TrainingTask {
        query: sc.query.clone(),
        checker: None,
        label: Some("Argentina; Lusail Stadium".into()),
        max_iterations: 1,
    };
    let v = judge(&h.rt, &out.transcript, &labelled).unwrap();
    assert!(v.passed);
    let bare = TrainingTask { label: None, ..labelled };
    assert!(matches!(judge(&h.rt, &out.transcript, &bare), Err(ReflectionError::NoEvaluator)));
    let wrong = TrainingTask {
        checker: Some(CheckerSpec::Contains {
            answer_contains: "Maracana".into(),
        }),
        ..bare
    };
    assert!(!judge(&h.rt, &out.transcript, &wrong).unwrap().passed);
}

#[test]
fn diagnosis_rejects_agents_outside_the_team() {
    let sc = scenarios::web_search();
    let bad = r#"{"failure_cause": "x", "experiences": [{"agent": "Ghost", "error_attribution": "a", "improvement_strategy": "b"}], "revised_op": {}}"#;
    let mut rules = vec![rule(&["[diagnose]"], bad)];
    rules.extend(sc.rules.clone());
    let h = common::harness(rules, sc.search_corpus.as_deref());
    let d = h.rt.config.embedding.dimension;
    let out = sopflow_core::pipeline::run_query(
        &h.rt,
        &SopRepository::in_memory(d),
        &PepStore::in_memory(d),
        &sc.query,
        &common::options(true),
    )
    .unwrap();
    let verdict = sopflow_core::domain::Verdict {
        passed: false,
        detail: "wrong".into(),
        evaluator: sopflow_core::domain::Evaluator::Checker,
    };
    match diagnose(&h.rt, &out.transcript, &verdict) {
        Err(ReflectionError::ParseFailed { attempts, reason }) => {
            assert_eq!(attempts, 3);
            assert!(reason.contains("Ghost"), "{reason}");
        }
        other => panic!("expected a parse failure, got {other:?}"),
    }
    assert!(out.transcript.messages().any(|m| m.kind == MessageKind::FinalAnswer));
}
