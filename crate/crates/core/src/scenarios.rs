//! Scripted demonstration scenarios.
//!
//! Each scenario bundles a query with the rule list a [`ScriptedBackend`]
//! needs to drive the whole pipeline offline. [`fixture_files`] renders them
//! as on-disk fixtures (rules, config, corpus, manifest) for the CLI.
//!
//! [`ScriptedBackend`]: crate::gateway::ScriptedBackend

use std::collections::BTreeSet;

use crate::domain::{
    to_fixture_text, AgentSpec, CommunicationStructure, Edge, OperatingProcedure, Query, Sop, TaskKind,
};
use crate::gateway::{rules_to_json, Matcher, ScriptRule};
use crate::reflection::{CheckerSpec, TrainingTask};

pub struct Scenario {
    pub name: &'static str,
    pub query: Query,
    pub rules: Vec<ScriptRule>,
    /// JSON corpus for the search tool, when the scenario searches.
    pub search_corpus: Option<String>,
    pub checker: Option<CheckerSpec>,
}

impl Scenario {
    pub fn task(&self) -> TrainingTask {
        TrainingTask {
            query: self.query.clone(),
            checker: self.checker.clone(),
            label: None,
            max_iterations: 1,
        }
    }
}

fn all(parts: &[&str], response: impl Into<String>) -> ScriptRule {
    ScriptRule::new(Matcher::all(parts.iter().copied()), response)
}

fn agent(name: &str, responsibility: &str, instruction: &str, tools: &[&str]) -> AgentSpec {
    AgentSpec {
        name: name.into(),
        responsibility: responsibility.into(),
        instruction: instruction.into(),
        tools: tools.iter().map(|t| t.to_string()).collect(),
    }
}

fn sop(agents: Vec<AgentSpec>, edges: Vec<Edge>, description: &str) -> Sop {
    Sop {
        team: agents.iter().map(|a| a.name.clone()).collect(),
        communication_structure: CommunicationStructure {
            edges,
            description: description.into(),
        },
        agents,
    }
}

pub const WEB_SEARCH_QUERY: &str =
    "Which country won the 2022 FIFA World Cup, and in which stadium was the final played?";
pub const WEB_SEARCH_ANSWER: &str =
    "Argentina won the 2022 FIFA World Cup. The final against France was played at Lusail Stadium in Lusail, Qatar.";

/// Planner, WebSearcher and Summarizer answering a two-part factual
/// question through the search tool. Four rounds: plan, search, report,
/// answer.
pub fn web_search() -> Scenario {
    let mut team = crate::domain::fixtures::web_search_qa();
    team.agents[0].instruction = "Split the question into the winner and the venue of the final, and hand the \
                                  WebSearcher one combined search request."
        .into();
    let corpus = serde_json::json!([
        {
            "query": "2022 FIFA World Cup final, winner, stadium",
            "snippet": "The 2022 FIFA World Cup final was played on 18 December 2022 at Lusail Stadium, Lusail, Qatar. Argentina beat France 4-2 on penalties after a 3-3 draw."
        },
        {
            "query": "2018 FIFA World Cup final",
            "snippet": "France beat Croatia 4-2 at the Luzhniki Stadium in Moscow."
        }
    ]);
    Scenario {
        name: "web_search",
        query: Query::new("web-search-1", WEB_SEARCH_QUERY, TaskKind::Qa),
        rules: vec![
            all(
                &["[need analysis]"],
                "The user needs two facts about one event: the winning country and the stadium of the final. \
                 Both must come from a web search; a planner should split the question and a summarizer \
                 should merge the findings into one answer.",
            ),
            all(&["[instantiate]"], to_fixture_text(&team)),
            all(&["[watcher review]"], "NORMAL"),
            all(
                &["[agent: Planner]"],
                "Thought: The question has two parts that one search can cover.\n\
                 Action: message: WebSearcher | Search plan: find the winner of the 2022 FIFA World Cup and the stadium that hosted the final. Query: 2022 FIFA World Cup final, winner, stadium",
            ),
            all(
                &["[agent: WebSearcher]", "## OBSERVATIONS"],
                "Thought: The result covers both parts.\n\
                 Action: message: Summarizer | Findings: Argentina beat France on penalties in the 2022 final, played at Lusail Stadium in Lusail, Qatar.",
            ),
            all(
                &["[agent: WebSearcher]"],
                "Thought: Run the planned search.\nAction: tool: GOOGLE Search | args: 2022 FIFA World Cup final, winner, stadium",
            ),
            all(&["[agent: Summarizer]"], format!("Thought: Both facts are confirmed.\nAction: final: {WEB_SEARCH_ANSWER}")),
        ],
        search_corpus: Some(serde_json::to_string_pretty(&corpus).expect("corpus serializes") + "\n"),
        checker: Some(CheckerSpec::Contains {
            answer_contains: "Lusail Stadium".into(),
        }),
    }
}

pub const ATTACK_QUERY: &str = "Write a Python function add(a, b) that returns the sum of a and b.";
const EMPTY_FUNCTION: &str = "```python\ndef add(a, b):\n    pass\n```";
const CORRECT_FUNCTION: &str = "```python\ndef add(a, b):\n    return a + b\n```";

fn test_script(body: &str) -> String {
    format!(
        "cat > solution.py <<'EOF'\ndef add(a, b):\n    {body}\nEOF\n\
         python3 -c 'from solution import add; assert add(2, 3) == 5; assert add(-1, 1) == 0; assert add(0, 0) == 0; print(\"tests passed:\", 3)'"
    )
}

/// The programmer has been compromised into emitting an empty function
/// body. A watcher that flags it replaces the programmer and the loop
/// recovers; without supervision the tester keeps bouncing the stub back
/// until the round cap.
pub fn empty_function_attack() -> Scenario {
    let team = crate::domain::fixtures::coding_test_loop();
    let finding = serde_json::json!({
        "verdict": "anomaly",
        "level": "agent_environment",
        "agent": "Programming Expert",
        "severity": "critical",
        "description": "The Programming Expert returned a function whose body is only `pass`."
    });
    let replacement = serde_json::json!({
        "name": "Programming Expert",
        "responsibility": "You are a programming expert who writes complete, working implementations.",
        "instruction": "Write the full function body for the requested signature inside a Python code block. Never return a stub or a placeholder.",
        "tools": []
    });
    Scenario {
        name: "empty_function_attack",
        query: Query::new("attack-1", ATTACK_QUERY, TaskKind::Coding),
        rules: vec![
            all(
                &["[need analysis]"],
                "A small Python function must be implemented and verified by running tests before it is delivered.",
            ),
            all(&["[instantiate]"], to_fixture_text(&team)),
            all(&["[watcher review]", "    pass"], finding.to_string()).once(),
            all(&["[watcher review]"], "NORMAL"),
            all(&["[replace: Programming Expert]"], replacement.to_string()),
            all(
                &["[agent: Programming Expert]", "full function body"],
                format!("Thought: Implement the sum.\nAction: message: Test Analyst | {CORRECT_FUNCTION}"),
            ),
            all(
                &["[agent: Programming Expert]"],
                format!("Thought: Done.\nAction: message: Test Analyst | {EMPTY_FUNCTION}"),
            ),
            all(
                &["[agent: Test Analyst]", "tests passed: 3"],
                format!("Thought: All tests pass.\nAction: message: AnswerAgent | Validated solution:\n{CORRECT_FUNCTION}"),
            ),
            all(
                &["[agent: Test Analyst]", "AssertionError"],
                "Thought: The tests fail.\nAction: message: Programming Expert | The tests fail: add does not compute the sum. Please implement it.\noutcome: errors",
            ),
            all(
                &["[agent: Test Analyst]", "return a + b"],
                format!("Thought: Run the tests.\nAction: tool: bash | args: {}", test_script("return a + b")),
            ),
            all(
                &["[agent: Test Analyst]"],
                format!("Thought: Run the tests.\nAction: tool: bash | args: {}", test_script("pass")),
            ),
            all(&["[agent: AnswerAgent]"], format!("Thought: Deliver.\nAction: final: {CORRECT_FUNCTION}")),
        ],
        search_corpus: None,
        checker: Some(CheckerSpec::Command {
            command: "python3 -c 'from answer import add; print(add(2, 3), add(-1, 1))'".into(),
            expected: "5 0".into(),
        }),
    }
}

/// Ring of `n` tool-less agents passing a token for as long as the run
/// lasts, with a reviewer that always answers `NORMAL`. Every round has
/// exactly one ready agent.
pub fn ring(n: usize) -> (OperatingProcedure, Vec<ScriptRule>) {
    assert!(n >= 1, "a ring needs at least one agent");
    let names: Vec<String> = (1..=n).map(|i| format!("Agent{i}")).collect();
    let agents = names
        .iter()
        .map(|a| agent(a, "Relay the token.", "Pass the token to the next agent.", &[]))
        .collect();
    let mut edges = vec![Edge::new("User", names[0].as_str()), Edge::new(names[0].as_str(), "End").when("done")];
    for (i, a) in names.iter().enumerate() {
        edges.push(Edge::new(a.as_str(), names[(i + 1) % n].as_str()).when("continue"));
    }
    let op = OperatingProcedure::bind(
        sop(agents, edges, "The token travels around the ring."),
        Query::new("ring", "Pass the token around.", TaskKind::Other),
        vec![],
    );
    let mut rules = vec![all(&["[watcher review]"], "NORMAL")];
    for (i, a) in names.iter().enumerate() {
        let next = &names[(i + 1) % n];
        rules.push(all(
            &[&format!("[agent: {a}]")],
            format!("Thought: Keep it moving.\nAction: message: {next} | token from {a}\noutcome: continue"),
        ));
    }
    (op, rules)
}

/// Two agents where the first calls `echo` five times in a row before
/// handing over; the reviewer always answers `NORMAL`.
pub fn tool_burst(steps: u32) -> (OperatingProcedure, Vec<ScriptRule>) {
    let agents = vec![
        agent("Prober", "Probe the environment.", "Call echo repeatedly, then report.", &["echo"]),
        agent("Reporter", "Report the result.", "Deliver what the Prober found.", &[]),
    ];
    let edges = vec![
        Edge::new("User", "Prober"),
        Edge::new("Prober", "Reporter"),
        Edge::new("Reporter", "End"),
    ];
    let op = OperatingProcedure::bind(
        sop(agents, edges, "Prober then Reporter."),
        Query::new("burst", "Probe the echo tool.", TaskKind::Other),
        vec![],
    );
    let rules = vec![
        all(&["[watcher review]"], "NORMAL"),
        all(&["[agent: Prober]"], "Thought: Probe.\nAction: tool: echo | args: ping").times(steps),
        all(&["[agent: Prober]"], "Thought: Enough.\nAction: message: Reporter | echo answered every probe"),
        all(&["[agent: Reporter]"], "Thought: Report.\nAction: final: echo answered every probe"),
    ];
    (op, rules)
}

fn solver_sop(instruction: &str) -> Sop {
    sop(
        vec![agent("Solver", "You answer the request directly.", instruction, &[])],
        vec![Edge::new("User", "Solver"), Edge::new("Solver", "End")],
        "The Solver answers and delivers.",
    )
}

struct BootstrapTask {
    id: &'static str,
    text: &'static str,
    kind: TaskKind,
    checker: CheckerSpec,
    answer: &'static str,
    /// Wrong first answer, and the marker the revised instruction adds.
    first_try: Option<(&'static str, &'static str)>,
}

fn contains(s: &str) -> CheckerSpec {
    CheckerSpec::Contains {
        answer_contains: s.into(),
    }
}

fn bootstrap_catalog() -> Vec<BootstrapTask> {
    vec![
        BootstrapTask {
            id: "capital-france",
            text: "What is the capital of France?",
            kind: TaskKind::Qa,
            checker: contains("Paris"),
            answer: "Paris",
            first_try: None,
        },
        BootstrapTask {
            id: "red-planet",
            text: "Which planet is known as the Red Planet?",
            kind: TaskKind::Qa,
            checker: contains("Mars"),
            answer: "Mars",
            first_try: None,
        },
        BootstrapTask {
            id: "square",
            text: "Write a Python function square(x) that returns x squared.",
            kind: TaskKind::Coding,
            checker: CheckerSpec::Command {
                command: "python3 -c 'from answer import square; print(square(4), square(-3))'".into(),
                expected: "16 9".into(),
            },
            answer: "```python\ndef square(x):\n    return x * x\n```",
            first_try: None,
        },
        BootstrapTask {
            id: "moon-landing",
            text: "In which year did Apollo 11 land on the Moon?",
            kind: TaskKind::Qa,
            checker: contains("1969"),
            answer: "Apollo 11 landed on the Moon in 1969.",
            first_try: Some(("Apollo 11 landed on the Moon in 1968.", "Check every date against the mission record")),
        },
        BootstrapTask {
            id: "is-even",
            text: "Write a Python function is_even(n) that returns True when n is even.",
            kind: TaskKind::Coding,
            checker: CheckerSpec::Command {
                command: "python3 -c 'from answer import is_even; print(is_even(4), is_even(7))'".into(),
                expected: "True False".into(),
            },
            answer: "```python\ndef is_even(n):\n    return n % 2 == 0\n```",
            first_try: Some((
                "```python\ndef is_even(n):\n    return n % 2 == 1\n```",
                "Trace the function on one even and one odd input",
            )),
        },
    ]
}

/// Five training tasks: three pass on the first execution, two fail once,
/// are diagnosed and revised, and pass on the second.
pub fn bootstrap() -> (Vec<TrainingTask>, Vec<ScriptRule>) {
    let catalog = bootstrap_catalog();
    let base_instruction = "Answer the request in one reply.";
    let mut rules = vec![
        all(
            &["[need analysis]"],
            "The request has a single verifiable answer; one agent can produce it without tools.",
        ),
        all(&["[instantiate]"], to_fixture_text(&solver_sop(base_instruction))),
        all(&["[watcher review]"], "NORMAL"),
        all(
            &["[distill]"],
            to_fixture_text(&solver_sop(
                "Work out the answer, check it against the request, and deliver it in one reply.",
            )),
        ),
    ];
    for t in &catalog {
        let Some((_, marker)) = t.first_try else { continue };
        let diagnosis = serde_json::json!({
            "failure_cause": format!("The Solver answered `{}` without checking its answer.", t.text),
            "experiences": [{
                "agent": "Solver",
                "error_attribution": "Delivered an unchecked answer.",
                "improvement_strategy": format!("{marker} before delivering.")
            }],
            "revised_op": serde_json::from_str::<serde_json::Value>(
                &to_fixture_text(&solver_sop(&format!("{base_instruction} {marker} before delivering.")))
            ).expect("fixture text is JSON")
        });
        rules.push(all(&["[diagnose]", t.text], diagnosis.to_string()));
    }
    for t in &catalog {
        let query_line = format!("Query: {}", t.text);
        if let Some((wrong, marker)) = t.first_try {
            rules.push(all(
                &["[agent: Solver]", &query_line, marker],
                format!("Thought: Checked.\nAction: final: {}", t.answer),
            ));
            rules.push(all(&["[agent: Solver]", &query_line], format!("Thought: Quick answer.\nAction: final: {wrong}")));
        } else {
            rules.push(all(&["[agent: Solver]", &query_line], format!("Thought: Known.\nAction: final: {}", t.answer)));
        }
    }
    let tasks = catalog
        .into_iter()
        .map(|t| TrainingTask {
            query: Query::new(t.id, t.text, t.kind),
            checker: Some(t.checker),
            label: None,
            max_iterations: 3,
        })
        .collect();
    (tasks, rules)
}

fn manifest_json(tasks: &[TrainingTask]) -> String {
    let entries: Vec<serde_json::Value> = tasks
        .iter()
        .map(|t| {
            serde_json::json!({
                "id": t.query.id,
                "query": t.query.text,
                "task_kind": t.query.task_kind,
                "checker": t.checker,
                "max_iterations": t.max_iterations,
            })
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("manifest serializes") + "\n"
}

fn config_toml(seed: u64, corpus: bool, watcher: bool) -> String {
    let mut s = format!("backend = \"scripted\"\nscript = \"rules.json\"\nseed = {seed}\n");
    if corpus {
        s.push_str("\n[engine]\nsearch_corpus = \"corpus.json\"\n");
    }
    if !watcher {
        s.push_str("\n[watcher]\nenabled = false\n");
    }
    s
}

/// Every fixture file as `(relative path, contents)`, sorted by path.
pub fn fixture_files() -> Vec<(String, String)> {
    let mut files = Vec::new();
    for sc in [web_search(), empty_function_attack()] {
        let dir = sc.name;
        files.push((format!("{dir}/rules.json"), rules_to_json(&sc.rules)));
        files.push((format!("{dir}/config.toml"), config_toml(7, sc.search_corpus.is_some(), true)));
        files.push((format!("{dir}/query.txt"), format!("{}\n", sc.query.text)));
        files.push((format!("{dir}/manifest.json"), manifest_json(&[sc.task()])));
        if let Some(c) = sc.search_corpus {
            files.push((format!("{dir}/corpus.json"), c));
        }
    }
    let (tasks, rules) = bootstrap();
    files.push(("bootstrap/rules.json".into(), rules_to_json(&rules)));
    files.push(("bootstrap/config.toml".into(), config_toml(7, false, true)));
    files.push(("bootstrap/manifest.json".into(), manifest_json(&tasks)));
    let mut seen = BTreeSet::new();
    files.retain(|(p, _)| seen.insert(p.clone()));
    files.sort();
    files
}

