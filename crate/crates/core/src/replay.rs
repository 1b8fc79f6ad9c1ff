//! Offline re-validation of a recorded transcript.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::domain::{ExecutionTranscript, InterventionKind, MessageKind, Node, Termination, TranscriptEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Invariant {
    Causality,
    Reachability,
    Cap,
    RoundCap,
    Conservation,
    PurgeCompleteness,
    Termination,
}

impl Invariant {
    pub const ALL: [Invariant; 7] = [
        Invariant::Causality,
        Invariant::Reachability,
        Invariant::Cap,
        Invariant::RoundCap,
        Invariant::Conservation,
        Invariant::PurgeCompleteness,
        Invariant::Termination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Invariant::Causality => "causality",
            Invariant::Reachability => "reachability",
            Invariant::Cap => "cap",
            Invariant::RoundCap => "round_cap",
            Invariant::Conservation => "conservation",
            Invariant::PurgeCompleteness => "purge_completeness",
            Invariant::Termination => "termination",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantResult {
    pub invariant: Invariant,
    pub violations: Vec<String>,
}

impl InvariantResult {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub results: Vec<InvariantResult>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(InvariantResult::passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &InvariantResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    pub fn get(&self, invariant: Invariant) -> Option<&InvariantResult> {
        self.results.iter().find(|r| r.invariant == invariant)
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            if r.passed() {
                writeln!(f, "PASS {}", r.invariant)?;
            } else {
                writeln!(f, "FAIL {}", r.invariant)?;
                for v in &r.violations {
                    writeln!(f, "  - {v}")?;
                }
            }
        }
        Ok(())
    }
}

/// Checks every invariant and reports each one separately.
pub fn validate_transcript(t: &ExecutionTranscript) -> ReplayReport {
    let results = Invariant::ALL
        .iter()
        .map(|&invariant| InvariantResult {
            invariant,
            violations: match invariant {
                Invariant::Causality => causality(t),
                Invariant::Reachability => reachability(t),
                Invariant::Cap => cap(t),
                Invariant::RoundCap => round_cap(t),
                Invariant::Conservation => conservation(t),
                Invariant::PurgeCompleteness => purge_completeness(t),
                Invariant::Termination => termination(t),
            },
        })
        .collect();
    ReplayReport { results }
}

fn causality(t: &ExecutionTranscript) -> Vec<String> {
    let mut out = Vec::new();
    let mut rounds: HashMap<u64, u32> = HashMap::new();
    let mut last_id = 0;
    for m in t.messages() {
        if m.id <= last_id {
            out.push(format!("message {} follows message {last_id}", m.id));
        }
        last_id = last_id.max(m.id);
        if let Some(c) = m.cause {
            match rounds.get(&c) {
                None => out.push(format!("message {} cites unknown cause {c}", m.id)),
                Some(&r) if r > m.round => {
                    out.push(format!("message {} (round {}) cites cause {c} from round {r}", m.id, m.round))
                }
                _ => {}
            }
        }
        rounds.insert(m.id, m.round);
    }
    for tc in t.tool_calls() {
        if tc.step == 0 {
            out.push(format!("tool call by {} in round {} has step 0", tc.agent, tc.round));
        }
    }
    out
}

fn reachability(t: &ExecutionTranscript) -> Vec<String> {
    let edges = &t.op.structure().edges;
    let has_edge = |from: &Node, to: &Node| edges.iter().any(|e| &e.from == from && &e.to == to);
    let in_team = |n: &Node| n.agent_name().is_some_and(|a| t.op.team().iter().any(|m| m == a));
    let mut out = Vec::new();
    let mut seen: Vec<&crate::domain::Message> = Vec::new();
    for m in t.messages() {
        for node in [&m.sender, &m.recipient] {
            if matches!(node, Node::Agent(_)) && !in_team(node) {
                out.push(format!("message {} names `{}`, who is not on the team", m.id, node.as_str()));
            }
        }
        let ok = match (&m.sender, &m.recipient) {
            (Node::Watcher, Node::Agent(_)) => m.kind == MessageKind::WatcherGuidance,
            (_, Node::End) => m.kind == MessageKind::FinalAnswer && has_edge(&m.sender, &Node::End),
            (Node::User, Node::Agent(_)) => has_edge(&m.sender, &m.recipient),
            (Node::Agent(_), Node::Agent(_)) => {
                has_edge(&m.sender, &m.recipient)
                    || seen.iter().any(|p| {
                        p.sender == m.recipient
                            && p.recipient == m.sender
                            && p.recipient_gen == m.sender_gen
                            && p.round < m.round
                    })
            }
            _ => false,
        };
        if !ok {
            out.push(format!(
                "message {} from {} to {} follows no edge and answers no earlier sender",
                m.id,
                m.sender.as_str(),
                m.recipient.as_str()
            ));
        }
        seen.push(m);
    }
    for tc in t.tool_calls() {
        if !t.op.team().contains(&tc.agent) {
            out.push(format!("tool call by `{}`, who is not on the team", tc.agent));
        }
    }
    out
}

fn cap(t: &ExecutionTranscript) -> Vec<String> {
    let mut out = Vec::new();
    let used = t.interventions().count();
    if !t.limits.watcher_enabled {
        if used > 0 || !t.reviews.is_empty() {
            out.push(format!("watcher disabled but {used} interventions and {} reviews recorded", t.reviews.len()));
        }
        if t.messages().any(|m| m.sender == Node::Watcher) {
            out.push("watcher disabled but watcher messages recorded".into());
        }
        return out;
    }
    if used as u64 > u64::from(t.limits.cap) {
        out.push(format!("{used} interventions exceed the cap of {}", t.limits.cap));
    }
    let anomalies = t.reviews.iter().filter(|r| r.anomaly).count();
    if used > anomalies {
        out.push(format!("{used} interventions but only {anomalies} anomalous reviews"));
    }
    out
}

fn round_cap(t: &ExecutionTranscript) -> Vec<String> {
    let mut out = Vec::new();
    if t.rounds_used > t.limits.max_rounds {
        out.push(format!("{} rounds used, cap is {}", t.rounds_used, t.limits.max_rounds));
    }
    let mut last = 0;
    for e in &t.events {
        let r = match e {
            TranscriptEvent::Message(m) => m.round,
            TranscriptEvent::ToolCall(c) => c.round,
            TranscriptEvent::Intervention(i) => i.round,
        };
        if r > t.rounds_used {
            out.push(format!("event in round {r} after the last round {}", t.rounds_used));
        }
        if r < last {
            out.push(format!("event in round {r} committed after round {last}"));
        }
        last = last.max(r);
    }
    for r in &t.reviews {
        if r.round > t.rounds_used {
            out.push(format!("review in round {} after the last round {}", r.round, t.rounds_used));
        }
    }
    out
}

fn conservation(t: &ExecutionTranscript) -> Vec<String> {
    let sent = t
        .messages()
        .filter(|m| m.sender.agent_name().is_some() && !m.reposted)
        .count() as u64;
    let tools = t.tool_calls().count() as u64;
    if sent + tools == t.actions {
        Vec::new()
    } else {
        vec![format!(
            "{sent} agent messages and {tools} tool calls recorded, but {} actions counted",
            t.actions
        )]
    }
}

fn purge_completeness(t: &ExecutionTranscript) -> Vec<String> {
    let mut current: BTreeMap<&str, u32> = BTreeMap::new();
    let mut out = Vec::new();
    for i in t.interventions() {
        if i.kind != InterventionKind::Replacement {
            continue;
        }
        let Some(g) = i.generation else {
            out.push(format!("replacement of {} in round {} records no generation", i.target, i.round));
            continue;
        };
        let prev = current.insert(i.target.as_str(), g).unwrap_or(0);
        if g <= prev {
            out.push(format!("replacement of {} installs generation {g} after {prev}", i.target));
        }
    }
    for (agent, &g) in &current {
        for m in t.messages() {
            for old in 0..g {
                if m.references(agent, old) {
                    out.push(format!("message {} still references {agent} generation {old}", m.id));
                }
            }
        }
        for tc in t.tool_calls() {
            if tc.agent == *agent && tc.generation < g {
                out.push(format!(
                    "tool call in round {} still belongs to {agent} generation {}",
                    tc.round, tc.generation
                ));
            }
        }
    }
    out
}

fn termination(t: &ExecutionTranscript) -> Vec<String> {
    let mut out = Vec::new();
    let last = t.messages().last();
    match t.terminated_by {
        Termination::FinalAnswer => {
            let (Some(answer), Some(agent)) = (&t.final_answer, &t.final_agent) else {
                out.push("terminated by a final answer but none is recorded".into());
                return out;
            };
            let node = Node::agent(agent.clone());
            if !t.op.structure().edges.iter().any(|e| e.from == node && e.to == Node::End) {
                out.push(format!("{agent} delivered the final answer without an edge to End"));
            }
            match last {
                Some(m) if m.sender == node && m.recipient == Node::End && &m.content == answer => {}
                _ => out.push("the last message is not the recorded final answer".into()),
            }
        }
        Termination::RoundCap => {
            if t.rounds_used != t.limits.max_rounds {
                out.push(format!(
                    "round cap reported after {} of {} rounds",
                    t.rounds_used, t.limits.max_rounds
                ));
            }
            if t.final_answer.is_some() {
                out.push("round cap reported alongside a final answer".into());
            }
        }
        Termination::FatalError => {
            if t.error.as_deref().is_none_or(str::is_empty) {
                out.push("fatal termination without an error message".into());
            }
        }
    }
    if t.terminated_by != Termination::FinalAnswer && t.messages().any(|m| m.recipient == Node::End) {
        out.push("a message reached End but the run did not end with a final answer".into());
    }
    out
}
