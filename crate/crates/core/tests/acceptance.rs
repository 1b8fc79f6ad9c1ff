//! Acceptance gate: every criterion runs here at its stated tolerance and
//! reports one PASS/FAIL line.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sopflow_core::domain::{
    fixtures, parse_sop_text, to_canonical_json, to_fixture_text, validate_sop, AgentSpec, CommunicationStructure,
    Edge, ExecutionTranscript, InterventionKind, NeedAnalysis, Query, Sop, SopCase, TaskKind, Termination,
    TriggerKind,
};
use sopflow_core::engine::{Engine, EnginePolicy, Supervisor};
use sopflow_core::gateway::{Gateway, HashingEmbedder};
use sopflow_core::prompts::Prompts;
use sopflow_core::reflection::{bootstrap_repository, judge, BootstrapStrategy};
use sopflow_core::replay::{validate_transcript, Invariant};
use sopflow_core::repository::{hybrid_score, RetrievalConfig, RetrievalMode, SopRepository};
use sopflow_core::scenarios;
use sopflow_core::watcher::{InterventionPolicy, Watcher};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Independent reference for the hashing embedder and the hybrid score.

fn oracle_embed(text: &str, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for token in text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let mut h: u64 = 14_695_981_039_346_656_037;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1_099_511_628_211);
        }
        v[(h % d as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Brute-force ranking: score every case, stable sort descending, take K.
fn oracle_rank(cases: &[(String, String)], query: &str, need: &str, lambda: f64, k: usize, d: usize) -> Vec<usize> {
    let lambda = if need.trim().is_empty() { 1.0 } else { lambda };
    let q = oracle_embed(query, d);
    let n = oracle_embed(need, d);
    let scores: Vec<f64> = cases
        .iter()
        .map(|(cq, cn)| {
            let sq = oracle_cos(&q, &oracle_embed(cq, d));
            let sn = if need.trim().is_empty() { 0.0 } else { oracle_cos(&n, &oracle_embed(cn, d)) };
            lambda * sq + (1.0 - lambda) * sn
        })
        .collect();
    let mut idx: Vec<usize> = (0..cases.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

const VOCAB: [&str; 24] = [
    "flight", "hotel", "budget", "paris", "tokyo", "python", "function", "test", "search", "plan", "museum",
    "train", "weather", "sum", "list", "sort", "day", "trip", "price", "code", "bug", "answer", "web", "map",
];

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=6);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

fn solver_sop() -> Sop {
    Sop {
        team: vec!["Solver".into()],
        communication_structure: CommunicationStructure {
            edges: vec![Edge::new("User", "Solver"), Edge::new("Solver", "End")],
            description: String::new(),
        },
        agents: vec![AgentSpec {
            name: "Solver".into(),
            responsibility: "solve".into(),
            instruction: "solve".into(),
            tools: vec![],
        }],
    }
}

struct SyntheticRepo {
    repo: SopRepository,
    texts: Vec<(String, String)>,
    query: String,
    need: String,
}

const D: usize = 16;

fn synthetic_repo(seed: u64) -> SyntheticRepo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = HashingEmbedder::new(D);
    let mut repo = SopRepository::in_memory(D);
    let mut texts: Vec<(String, String)> = Vec::new();
    for i in 0..rng.random_range(1..=32) {
        let (q, n) = if !texts.is_empty() && rng.random_bool(0.15) {
            texts[rng.random_range(0..texts.len())].clone()
        } else {
            (phrase(&mut rng), phrase(&mut rng))
        };
        let case = SopCase {
            id: String::new(),
            query: Query::new(format!("c{i}"), q.clone(), TaskKind::Other),
            need: NeedAnalysis::new(n.clone()),
            sop: solver_sop(),
            query_embedding: None,
            need_embedding: None,
            created_at: String::new(),
        };
        repo.add_case(case, &BTreeSet::new(), &embedder).unwrap();
        texts.push((q, n));
    }
    let need = if rng.random_bool(0.1) { String::new() } else { phrase(&mut rng) };
    SyntheticRepo {
        repo,
        texts,
        query: phrase(&mut rng),
        need,
    }
}

fn ranking(s: &SyntheticRepo, cfg: &RetrievalConfig) -> Vec<usize> {
    let embedder = HashingEmbedder::new(D);
    s.repo
        .retrieve(
            &Query::new("q", s.query.clone(), TaskKind::Other),
            &NeedAnalysis::new(s.need.clone()),
            cfg,
            &embedder,
        )
        .unwrap()
        .into_iter()
        .map(|c| c.case.query.id[1..].parse::<usize>().unwrap())
        .collect()
}

fn retrieval_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    for seed in 0..100 {
        let s = synthetic_repo(seed);
        for lambda in [0.0, 0.3, 1.0] {
            for k in [1, 2, 5] {
                let cfg = RetrievalConfig {
                    lambda,
                    k,
                    mode: RetrievalMode::Hybrid,
                };
                let got = ranking(&s, &cfg);
                let want = oracle_rank(&s.texts, &s.query, &s.need, lambda, k, D);
                ensure(got == want, || {
                    format!("seed {seed}, lambda {lambda}, K {k}: got {got:?}, oracle {want:?}")
                })?;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))
}

fn retriever_mode_reduction() -> Outcome {
    for seed in 0..100 {
        let s = synthetic_repo(seed);
        let k = s.texts.len();
        let cfg = |lambda, mode| RetrievalConfig { lambda, k, mode };
        let hybrid1 = ranking(&s, &cfg(1.0, RetrievalMode::Hybrid));
        let hybrid0 = ranking(&s, &cfg(0.0, RetrievalMode::Hybrid));
        let query_only = ranking(&s, &cfg(0.3, RetrievalMode::QueryOnly));
        let need_only = ranking(&s, &cfg(0.3, RetrievalMode::NeedOnly));
        ensure(query_only == hybrid1, || format!("seed {seed}: query_only differs from lambda=1"))?;
        ensure(need_only == hybrid0, || format!("seed {seed}: need_only differs from lambda=0"))?;
    }
    Ok(())
}

fn hybrid_arithmetic() -> Outcome {
    let s = hybrid_score(0.5, 1.0, 0.3).map_err(|e| e.to_string())?;
    ensure((s - 0.85).abs() <= 1e-12, || format!("hybrid_score(0.5, 1.0, 0.3) = {s}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..1000 {
        let q: f64 = rng.random_range(-1.0..=1.0);
        let n: f64 = rng.random_range(-1.0..=1.0);
        let l: f64 = rng.random_range(0.0..=1.0);
        let h = |a, b, l| hybrid_score(a, b, l).unwrap();
        ensure((h(q, n, 1.0) - q).abs() <= 1e-12, || format!("triple {i}: lambda=1 endpoint"))?;
        ensure((h(q, n, 0.0) - n).abs() <= 1e-12, || format!("triple {i}: lambda=0 endpoint"))?;
        ensure((h(q, q, l) - q).abs() <= 1e-12, || format!("triple {i}: equal arguments"))?;
    }
    Ok(())
}

fn fixture_fidelity() -> Outcome {
    let tools: BTreeSet<String> = ["bash", "GOOGLE Search"].iter().map(|s| s.to_string()).collect();
    for (name, text) in [("web_search_qa", fixtures::WEB_SEARCH_QA), ("coding_test_loop", fixtures::CODING_TEST_LOOP)] {
        let sop = parse_sop_text(text).map_err(|e| format!("{name}: {e}"))?;
        let diagnostics = validate_sop(&sop, &tools);
        ensure(diagnostics.is_empty(), || format!("{name}: {diagnostics:?}"))?;
        let first = to_fixture_text(&sop);
        let reparsed = parse_sop_text(&first).map_err(|e| format!("{name} reparse: {e}"))?;
        ensure(reparsed == sop, || format!("{name}: reparsed SOP differs"))?;
        ensure(to_fixture_text(&reparsed) == first, || format!("{name}: fixture text not byte-stable"))?;
        ensure(to_canonical_json(&reparsed) == to_canonical_json(&sop), || {
            format!("{name}: canonical JSON not byte-stable")
        })?;
    }
    let coding = fixtures::coding_test_loop();
    ensure(
        coding.team == ["Programming Expert", "Test Analyst", "AnswerAgent"],
        || format!("coding team {:?}", coding.team),
    )?;
    let loops: Vec<String> = coding
        .communication_structure
        .edges
        .iter()
        .filter_map(|e| e.condition.as_ref().map(|c| format!("{} -> {} ({c})", e.from, e.to)))
        .collect();
    ensure(
        loops == ["Test Analyst -> Programming Expert (errors)", "Test Analyst -> AnswerAgent (correct)"],
        || format!("conditional edges {loops:?}"),
    )?;
    let web = fixtures::web_search_qa();
    ensure(web.team == ["Planner", "WebSearcher", "Summarizer"], || format!("web team {:?}", web.team))
}

fn deterministic_end_to_end() -> Outcome {
    let started = Instant::now();
    let sc = scenarios::web_search();
    let (a, _h1) = common::run_scenario(&sc, true);
    let (b, _h2) = common::run_scenario(&sc, true);
    let elapsed = started.elapsed();
    let (ta, tb) = (a.transcript.to_jsonl(), b.transcript.to_jsonl());
    ensure(ta == tb, || "transcripts differ between runs".into())?;
    ensure(a.transcript.terminated_by == Termination::FinalAnswer, || common::summary(&a.transcript))?;
    ensure(a.transcript.final_answer.as_deref() == Some(scenarios::WEB_SEARCH_ANSWER), || {
        format!("final answer {:?}", a.transcript.final_answer)
    })?;
    let parsed = ExecutionTranscript::from_jsonl(&ta).map_err(|e| e.to_string())?;
    let report = validate_transcript(&parsed);
    ensure(report.passed(), || report.to_string())?;
    ensure(elapsed < Duration::from_secs(2), || format!("two runs took {elapsed:?}"))
}

fn supervised_run(op: &sopflow_core::domain::OperatingProcedure, rules: Vec<sopflow_core::gateway::ScriptRule>, max_rounds: u32) -> ExecutionTranscript {
    let gateway = Gateway::scripted(rules);
    let registry = common::fuzz::echo_registry();
    let prompts = Prompts::default();
    let policy = InterventionPolicy {
        cap: u32::MAX,
        ..InterventionPolicy::default()
    };
    let mut watcher = Watcher::new(&gateway, &prompts, registry.names(), policy, op.team().len(), vec![]);
    let engine = Engine::new(
        &gateway,
        &registry,
        &prompts,
        EnginePolicy {
            max_rounds,
            ..EnginePolicy::default()
        },
    );
    engine.run(op, Some(&mut watcher as &mut dyn Supervisor))
}

fn watcher_cadence() -> Outcome {
    for n in 2..=8usize {
        let (op, rules) = scenarios::ring(n);
        let t = supervised_run(&op, rules, 20);
        ensure(t.terminated_by == Termination::RoundCap && t.rounds_used == 20, || {
            format!("n={n}: {}", common::summary(&t))
        })?;
        let m = (n / 2).max(1) as u32;
        let want: Vec<u32> = (1..=20).filter(|r| r % m == 0).collect();
        let got: Vec<u32> = t.reviews.iter().map(|r| r.round).collect();
        ensure(got == want, || format!("n={n}, M={m}: reviews at {got:?}, expected {want:?}"))?;
        ensure(t.reviews.iter().all(|r| r.trigger == TriggerKind::Round && !r.anomaly), || {
            format!("n={n}: unexpected env review or anomaly")
        })?;
    }
    let (op, rules) = scenarios::tool_burst(5);
    let t = supervised_run(&op, rules, 20);
    let env: Vec<u32> = t.reviews.iter().filter(|r| r.trigger == TriggerKind::Env).map(|r| r.round).collect();
    ensure(env == [5], || format!("env reviews at rounds {env:?}, expected [5]"))?;
    let (op, rules) = scenarios::tool_burst(4);
    let t = supervised_run(&op, rules, 20);
    let env = t.reviews.iter().filter(|r| r.trigger == TriggerKind::Env).count();
    ensure(env == 0, || format!("4 tool steps produced {env} env reviews"))
}

fn attack_recovery() -> Outcome {
    let sc = scenarios::empty_function_attack();
    let task = sc.task();
    let (on, h_on) = common::run_scenario(&sc, true);
    let t = &on.transcript;
    let replacements = t.interventions().filter(|i| i.kind == InterventionKind::Replacement).count();
    ensure(replacements == 1, || format!("watcher arm: {replacements} replacements"))?;
    let verdict = judge(&h_on.rt, t, &task).map_err(|e| e.to_string())?;
    ensure(verdict.passed, || format!("watcher arm failed its checker: {}", verdict.detail))?;

    let (off, h_off) = common::run_scenario(&sc, false);
    let verdict = judge(&h_off.rt, &off.transcript, &task).map_err(|e| e.to_string())?;
    ensure(!verdict.passed, || "unsupervised arm passed its checker".into())?;
    ensure(off.transcript.interventions().count() == 0, || "unsupervised arm intervened".into())
}

fn purge_completeness() -> Outcome {
    let sc = scenarios::empty_function_attack();
    let (out, _h) = common::run_scenario(&sc, true);
    let t = &out.transcript;
    let target = "Programming Expert";
    let stale_messages = t.messages().filter(|m| m.references(target, 0)).count();
    let stale_tools = t.tool_calls().filter(|c| c.agent == target && c.generation == 0).count();
    ensure(stale_messages == 0 && stale_tools == 0, || {
        format!("{stale_messages} messages and {stale_tools} tool records still reference the replaced agent")
    })?;
    let parsed = ExecutionTranscript::from_jsonl(&t.to_jsonl()).map_err(|e| e.to_string())?;
    let report = validate_transcript(&parsed);
    let purge = report.get(Invariant::PurgeCompleteness).expect("purge invariant checked");
    ensure(purge.passed(), || report.to_string())?;
    ensure(report.passed(), || report.to_string())
}

fn reflective_bookkeeping() -> Outcome {
    let (tasks, rules) = scenarios::bootstrap();
    let h = common::harness(rules, None);
    let (mut repo, mut pep) = h.rt.open_stores().map_err(|e| e.to_string())?;
    let (sop_before, pep_before) = (repo.len(), pep.len());
    let opts = common::options(true);
    let report = bootstrap_repository(&h.rt, &tasks, &mut repo, &mut pep, &opts, BootstrapStrategy::Staged)
        .map_err(|e| e.to_string())?;
    let executions: Vec<u32> = report.tasks.iter().map(|r| r.executions).collect();
    ensure(executions == [1, 1, 1, 2, 2], || format!("executions per task {executions:?}"))?;
    ensure(report.tasks.iter().all(|r| r.verdict.passed && r.error.is_none()), || {
        format!("not every task passed: {:?}", report.tasks.iter().map(|r| (&r.verdict.detail, &r.error)).collect::<Vec<_>>())
    })?;
    ensure(repo.len() - sop_before == 5 && report.sop_added == 5, || format!("+{} SOP cases", repo.len() - sop_before))?;
    ensure(pep.len() - pep_before == 2 && report.pep_added == 2, || format!("+{} PEP records", pep.len() - pep_before))?;
    drop((repo, pep));
    let (repo, pep) = h.rt.open_stores().map_err(|e| e.to_string())?;
    ensure(repo.len() == 5 && pep.len() == 2, || {
        format!("after reopening: {} cases, {} records", repo.len(), pep.len())
    })
}

fn cap_safety() -> Outcome {
    for seed in 0..200 {
        let case = common::fuzz::case(seed);
        let t = common::fuzz::run(&case);
        ensure(t.rounds_used <= case.engine.max_rounds, || {
            format!("seed {seed}: {} rounds over cap {}", t.rounds_used, case.engine.max_rounds)
        })?;
        let cap = case.watcher.map_or(0, |w| w.cap);
        let used = t.interventions().count() as u32;
        ensure(used <= cap, || format!("seed {seed}: {used} interventions over cap {cap}"))?;
        let parsed = ExecutionTranscript::from_jsonl(&t.to_jsonl()).map_err(|e| format!("seed {seed}: {e}"))?;
        let report = validate_transcript(&parsed);
        ensure(report.passed(), || format!("seed {seed}:\n{report}"))?;
    }
    Ok(())
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("retrieval oracle equivalence", retrieval_oracle_equivalence),
        ("retriever-mode reduction", retriever_mode_reduction),
        ("hybrid score arithmetic", hybrid_arithmetic),
        ("fixture fidelity", fixture_fidelity),
        ("deterministic end-to-end", deterministic_end_to_end),
        ("watcher cadence", watcher_cadence),
        ("attack recovery", attack_recovery),
        ("purge completeness", purge_completeness),
        ("reflective bookkeeping", reflective_bookkeeping),
        ("round-cap and intervention-cap safety", cap_safety),
    ];
    let mut failures = Vec::new();
    let mut out = std::io::stdout();
    let _ = writeln!(out);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let line = match check() {
            Ok(()) => format!("PASS [{:>2}] {name} ({:.2?})", i + 1, started.elapsed()),
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                format!("FAIL [{:>2}] {name}: {e}", i + 1)
            }
        };
        // Written past the test harness capture so the report always shows.
        let _ = writeln!(out, "{line}");
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
