//! Seeded random scripted runs for safety properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sopflow_core::domain::{
    AgentSpec, CommunicationStructure, Edge, ExecutionTranscript, OperatingProcedure, Query, Sop, TaskKind,
};
use sopflow_core::engine::{Engine, EnginePolicy, Supervisor, ToolRegistry};
use sopflow_core::gateway::{Gateway, Matcher, ScriptRule};
use sopflow_core::prompts::Prompts;
use sopflow_core::watcher::{InterventionPolicy, Watcher};

pub struct FuzzCase {
    pub op: OperatingProcedure,
    pub rules: Vec<ScriptRule>,
    pub engine: EnginePolicy,
    pub watcher: Option<InterventionPolicy>,
}

fn rule(parts: &[&str], response: String) -> ScriptRule {
    ScriptRule::new(Matcher::all(parts.iter().copied()), response)
}

fn anomaly(agent: &str, severity: &str) -> String {
    serde_json::json!({
        "verdict": "anomaly",
        "level": "inter_agent",
        "agent": agent,
        "severity": severity,
        "description": "fuzzed finding"
    })
    .to_string()
}

pub fn case(seed: u64) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=5usize);
    let names: Vec<String> = (1..=n).map(|i| format!("F{i}")).collect();
    let tooled: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();

    let mut edges = vec![Edge::new("User", names[0].as_str())];
    for i in 0..n - 1 {
        edges.push(Edge::new(names[i].as_str(), names[i + 1].as_str()).when("next"));
    }
    for _ in 0..rng.random_range(0..=2) {
        let from = rng.random_range(1..n);
        let to = rng.random_range(0..from);
        edges.push(Edge::new(names[from].as_str(), names[to].as_str()).when("back"));
    }
    edges.push(Edge::new(names[n - 1].as_str(), "End"));
    let agents = names
        .iter()
        .zip(&tooled)
        .map(|(name, &t)| AgentSpec {
            name: name.clone(),
            responsibility: "fuzz".into(),
            instruction: "fuzz".into(),
            tools: if t { vec!["echo".into()] } else { vec![] },
        })
        .collect();
    let sop = Sop {
        team: names.clone(),
        communication_structure: CommunicationStructure {
            edges,
            description: String::new(),
        },
        agents,
    };
    let kind = [TaskKind::Planning, TaskKind::Qa, TaskKind::Coding, TaskKind::Other][rng.random_range(0..4)];
    let op = OperatingProcedure::bind(sop, Query::new(format!("fuzz-{seed}"), "fuzz the engine", kind), vec![]);

    let mut rules = Vec::new();
    for _ in 0..rng.random_range(0..=4) {
        let target = &names[rng.random_range(0..n)];
        let reply = match rng.random_range(0..4) {
            0 => "NORMAL".to_string(),
            1 => anomaly(target, "recoverable"),
            2 => anomaly(target, "critical"),
            _ => "not json".to_string(),
        };
        rules.push(rule(&["[watcher review]"], reply).times(rng.random_range(1..=2)));
    }
    rules.push(rule(&["[watcher review]"], "NORMAL".into()));
    if rng.random_bool(0.3) {
        rules.push(rule(&["[replace: "], "no spec here".into()).once());
    }
    rules.push(rule(
        &["[replace: "],
        r#"{"responsibility": "fresh", "instruction": "act carefully"}"#.into(),
    ));

    for (i, name) in names.iter().enumerate() {
        let header = format!("[agent: {name}]");
        let next = names.get(i + 1);
        let mut choices: Vec<String> = vec![
            "no action at all".into(),
            "Action: tool: missing_tool | x".into(),
            "Action: message: Nobody | hi".into(),
            format!("Action: message: {name} | talking to myself"),
        ];
        if let Some(next) = next {
            choices.push(format!("Action: message: {next} | same words"));
            choices.push(format!("Action: message: {next} | step from {name}\noutcome: next"));
        } else {
            choices.push("Action: final: fuzz answer".into());
        }
        if i > 0 {
            choices.push(format!("Action: message: {} | question back", names[i - 1]));
        }
        if tooled[i] {
            choices.push("Action: tool: echo | ping".into());
            choices.push("Action: tool: echo | ping".into());
        }
        for _ in 0..rng.random_range(0..=5) {
            let pick = choices[rng.random_range(0..choices.len())].clone();
            rules.push(rule(&[&header], format!("Thought: fuzz\n{pick}")).times(rng.random_range(1..=3)));
        }
        let fallback = match next {
            Some(next) if rng.random_bool(0.8) => format!("Action: message: {next} | onward from {name}"),
            Some(_) => "Action: tool: echo | ping".into(),
            None => "Action: final: fuzz answer".into(),
        };
        // Occasionally leave the script short so the model call fails mid-run.
        if rng.random_bool(0.9) {
            rules.push(rule(&[&header], format!("Thought: fuzz\n{fallback}")));
        }
    }

    let engine = EnginePolicy {
        max_rounds: rng.random_range(1..=12),
        parallel: rng.random_bool(0.3),
        seed,
    };
    let watcher = rng.random_bool(0.8).then(|| InterventionPolicy {
        interval: if rng.random_bool(0.5) { None } else { Some(rng.random_range(1..=3)) },
        env_threshold: rng.random_range(1..=4),
        cap: rng.random_range(0..=3),
    });
    FuzzCase {
        op,
        rules,
        engine,
        watcher,
    }
}

pub fn echo_registry() -> ToolRegistry {
    let mut r = ToolRegistry::new();
    r.register_fn("echo", "echo <text>: returns the text", |a| Ok(format!("echo: {a}")))
        .unwrap();
    r
}

pub fn run(case: &FuzzCase) -> ExecutionTranscript {
    let gateway = Gateway::scripted(case.rules.clone());
    let registry = echo_registry();
    let prompts = Prompts::default();
    let engine = Engine::new(&gateway, &registry, &prompts, case.engine);
    match case.watcher {
        Some(policy) => {
            let mut w = Watcher::new(&gateway, &prompts, registry.names(), policy, case.op.team().len(), vec![]);
            engine.run(&case.op, Some(&mut w as &mut dyn Supervisor))
        }
        None => engine.run(&case.op, None),
    }
}
