//! Runtime supervision: trigger policy, dual-level review, and the two
//! interventions (experience-augmented guidance and agent replacement).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    extract_json_object, ingest_agent, to_fixture_text, validate_op, AgentSpec, Intervention, InterventionKind,
    InterventionPayload, MessageKind, OperatingProcedure, PepRecord, ReviewEntry, TranscriptEvent, TriggerKind,
};
use crate::engine::{ExecutionState, SupervisionLimits, Supervisor};
use crate::gateway::{Gateway, GatewayError};
use crate::prompts::Prompts;

pub const DEFAULT_ENV_THRESHOLD: u32 = 5;
pub const DEFAULT_CAP: u32 = 8;
pub const REPAIR_BUDGET: u32 = 2;
/// Identical messages from one agent within a review window that count as a loop.
const REPEAT_THRESHOLD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    /// Review every `interval` rounds; `None` means half the team, at least 1.
    pub interval: Option<u32>,
    pub env_threshold: u32,
    pub cap: u32,
}

impl Default for InterventionPolicy {
    fn default() -> Self {
        Self {
            interval: None,
            env_threshold: DEFAULT_ENV_THRESHOLD,
            cap: DEFAULT_CAP,
        }
    }
}

impl InterventionPolicy {
    pub fn comm_interval(&self, team_size: usize) -> u32 {
        self.interval
            .unwrap_or_else(|| u32::try_from(team_size / 2).unwrap_or(u32::MAX))
            .max(1)
    }

    pub fn frequency(&self, team_size: usize) -> f64 {
        1.0 / f64::from(self.comm_interval(team_size))
    }
}

/// Counters the engine exposes at a checkpoint. Round triggers are only
/// evaluated at the barrier, env triggers only right after a tool call.
#[derive(Debug, Clone)]
pub struct TriggerCounters<'a> {
    pub round: u32,
    pub at_barrier: bool,
    pub env_steps: &'a BTreeMap<String, u32>,
    pub interventions_used: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trigger {
    pub kind: TriggerKind,
    /// The agent over the env threshold, for env triggers.
    pub agent: Option<String>,
}

pub fn should_intervene(c: &TriggerCounters<'_>, policy: &InterventionPolicy, team_size: usize) -> Option<Trigger> {
    if c.interventions_used >= policy.cap {
        return None;
    }
    if c.at_barrier {
        let m = policy.comm_interval(team_size);
        return (c.round > 0 && c.round.is_multiple_of(m)).then_some(Trigger {
            kind: TriggerKind::Round,
            agent: None,
        });
    }
    let threshold = policy.env_threshold.max(1);
    c.env_steps
        .iter()
        .find(|(_, steps)| **steps >= threshold)
        .map(|(agent, _)| Trigger {
            kind: TriggerKind::Env,
            agent: Some(agent.clone()),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingVerdict {
    Normal,
    Anomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyLevel {
    InterAgent,
    AgentEnvironment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Recoverable,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub verdict: FindingVerdict,
    pub level: AnomalyLevel,
    pub agent: Option<String>,
    pub description: String,
    pub severity: Severity,
    /// Newest message id backing a rule-based finding.
    #[serde(skip)]
    evidence: Option<u64>,
}

impl Finding {
    pub fn normal() -> Self {
        Self {
            verdict: FindingVerdict::Normal,
            level: AnomalyLevel::InterAgent,
            agent: None,
            description: String::new(),
            severity: Severity::Recoverable,
            evidence: None,
        }
    }

    pub fn anomaly(level: AnomalyLevel, agent: &str, severity: Severity, description: impl Into<String>) -> Self {
        Self {
            verdict: FindingVerdict::Anomaly,
            level,
            agent: Some(agent.to_string()),
            description: description.into(),
            severity,
            evidence: None,
        }
    }

    pub fn is_anomaly(&self) -> bool {
        self.verdict == FindingVerdict::Anomaly
    }
}

#[derive(Debug, Error)]
pub enum WatcherError {
    #[error("intervention cap of {0} reached")]
    CapExceeded(u32),
    #[error("finding is not an anomaly")]
    NotAnAnomaly,
    #[error("agent `{0}` is not in the team")]
    UnknownAgent(String),
    #[error("replacement for `{agent}` failed after {attempts} attempts: {reason}")]
    ReplacementFailed { agent: String, attempts: u32, reason: String },
    #[error("model error: {0}")]
    Model(#[from] GatewayError),
    #[error("engine rejected the intervention: {0}")]
    Engine(String),
}

/// Loop check: an agent sent the same content at least three times.
pub fn check_repeated_messages(window: &[TranscriptEvent]) -> Option<Finding> {
    let mut seen: BTreeMap<(&str, &str), (usize, u64)> = BTreeMap::new();
    for e in window {
        if let TranscriptEvent::Message(m) = e {
            if let Some(sender) = m.sender.agent_name() {
                if m.reposted {
                    continue;
                }
                let entry = seen.entry((sender, m.content.trim())).or_insert((0, 0));
                entry.0 += 1;
                entry.1 = entry.1.max(m.id);
            }
        }
    }
    seen.into_iter()
        .filter(|(_, (n, _))| *n >= REPEAT_THRESHOLD)
        .max_by_key(|(_, (_, newest))| *newest)
        .map(|((agent, _), (n, newest))| {
            let mut f = Finding::anomaly(
                AnomalyLevel::InterAgent,
                agent,
                Severity::Recoverable,
                format!("{agent} repeated an identical message {n} times without making progress"),
            );
            f.evidence = Some(newest);
            f
        })
}

/// Fabrication check: a tool-equipped agent on a tool-dependent task handed
/// over a deliverable without a single tool call.
pub fn check_untooled_deliverable(
    window: &[TranscriptEvent],
    op: &OperatingProcedure,
    tool_calls: &BTreeMap<String, u32>,
) -> Option<Finding> {
    if !op.bound_query.task_kind.requires_tools() {
        return None;
    }
    window.iter().rev().find_map(|e| {
        let TranscriptEvent::Message(m) = e else { return None };
        let agent = m.sender.agent_name()?;
        let delivers = matches!(m.kind, MessageKind::Task | MessageKind::FinalAnswer) && !m.reposted;
        let has_tools = op.agent(agent).is_some_and(|s| !s.tools.is_empty());
        let idle = tool_calls.get(agent).copied().unwrap_or(0) == 0;
        (delivers && has_tools && idle).then(|| {
            let tools = op.agent(agent).map(|s| s.tools.join(", ")).unwrap_or_default();
            let mut f = Finding::anomaly(
                AnomalyLevel::AgentEnvironment,
                agent,
                Severity::Critical,
                format!("{agent} produced a deliverable without invoking its tools ({tools}); the content is likely fabricated"),
            );
            f.evidence = Some(m.id);
            f
        })
    })
}

/// Parses a reviewer reply. Anything unusable counts as normal.
pub fn parse_finding(reply: &str, op: &OperatingProcedure) -> Finding {
    let text = reply.trim();
    if text.len() >= 6 && text[..6].eq_ignore_ascii_case("normal") {
        return Finding::normal();
    }
    let Ok(v) = extract_json_object(text) else {
        tracing::warn!("unparseable watcher reply treated as normal");
        return Finding::normal();
    };
    let field = |k: &str| v.get(k).and_then(|x| x.as_str()).map(|s| s.trim().to_ascii_lowercase());
    if field("verdict").as_deref() == Some("normal") {
        return Finding::normal();
    }
    let Some(agent) = v.get("agent").and_then(|x| x.as_str()).map(str::trim) else {
        tracing::warn!("anomaly without an agent treated as normal");
        return Finding::normal();
    };
    if !op.team().iter().any(|t| t == agent) {
        tracing::warn!(agent, "anomaly names an agent outside the team; treated as normal");
        return Finding::normal();
    }
    let level = match field("level").as_deref() {
        Some("agent_environment" | "agent-environment" | "environment") => AnomalyLevel::AgentEnvironment,
        _ => AnomalyLevel::InterAgent,
    };
    let severity = match field("severity").as_deref() {
        Some("critical") => Severity::Critical,
        _ => Severity::Recoverable,
    };
    let description = v
        .get("description")
        .and_then(|x| x.as_str())
        .unwrap_or("anomaly reported by the reviewer")
        .to_string();
    Finding::anomaly(level, agent, severity, description)
}

/// Improvement strategies from `hits` that apply to `agent`, with the ids of
/// the records they came from. Falls back to every strategy when none of the
/// records names the agent.
pub fn matched_strategies<'h>(hits: &'h [PepRecord], agent: &str) -> (Vec<&'h str>, Vec<String>) {
    let pick = |only_agent: bool| {
        let mut strategies = Vec::new();
        let mut refs = Vec::new();
        for r in hits {
            let mut used = false;
            for e in r.experiences.iter().filter(|e| !only_agent || e.agent == agent) {
                strategies.push(e.improvement_strategy.as_str());
                used = true;
            }
            if used {
                refs.push(r.id.clone());
            }
        }
        (strategies, refs)
    };
    let specific = pick(true);
    if specific.0.is_empty() {
        pick(false)
    } else {
        specific
    }
}

pub(crate) fn render_event(out: &mut String, e: &TranscriptEvent) {
    let _ = match e {
        TranscriptEvent::Message(m) => {
            let kind = serde_json::to_value(m.kind).expect("kind serializes");
            writeln!(
                out,
                "- #{} [round {}] {} -> {} ({}): {}",
                m.id,
                m.round,
                m.sender,
                m.recipient,
                kind.as_str().unwrap_or_default(),
                m.content
            )
        }
        TranscriptEvent::ToolCall(t) => {
            let status = serde_json::to_value(t.outcome).expect("outcome serializes");
            writeln!(
                out,
                "- [round {}] {} called {} (step {}) with `{}` -> [{}] {}",
                t.round,
                t.agent,
                t.tool,
                t.step,
                t.arguments,
                status.as_str().unwrap_or_default(),
                t.observation
            )
        }
        TranscriptEvent::Intervention(i) => {
            let kind = serde_json::to_value(i.kind).expect("kind serializes");
            writeln!(
                out,
                "- [round {}] watcher {} on {}",
                i.round,
                kind.as_str().unwrap_or_default(),
                i.target
            )
        }
    };
}

fn render_experiences(out: &mut String, hits: &[PepRecord]) {
    for r in hits {
        let _ = writeln!(out, "- past query: {} (failure: {})", r.query.text, r.failure_cause);
        for e in &r.experiences {
            let _ = writeln!(
                out,
                "  - {}: {} -> {}",
                e.agent, e.error_attribution, e.improvement_strategy
            );
        }
    }
}

/// The supervising agent. Implements [`Supervisor`] so the engine can call it
/// at round barriers and after tool calls.
pub struct Watcher<'a> {
    gateway: &'a Gateway,
    prompts: &'a Prompts,
    registry_tools: BTreeSet<String>,
    policy: InterventionPolicy,
    team_size: usize,
    pep_hits: Vec<PepRecord>,
    /// Message ids up to here already led to an intervention.
    acted_upto: u64,
}

impl<'a> Watcher<'a> {
    pub fn new(
        gateway: &'a Gateway,
        prompts: &'a Prompts,
        registry_tools: BTreeSet<String>,
        policy: InterventionPolicy,
        team_size: usize,
        pep_hits: Vec<PepRecord>,
    ) -> Self {
        Self {
            gateway,
            prompts,
            registry_tools,
            policy,
            team_size,
            pep_hits,
            acted_upto: 0,
        }
    }

    pub fn policy(&self) -> &InterventionPolicy {
        &self.policy
    }

    pub fn pep_hits(&self) -> &[PepRecord] {
        &self.pep_hits
    }

    fn window_rounds(&self) -> u32 {
        self.policy.comm_interval(self.team_size).max(3)
    }

    /// Rule checks first; the model is only asked when neither fires.
    pub fn review(
        &self,
        window: &[TranscriptEvent],
        op: &OperatingProcedure,
        pep_hits: &[PepRecord],
        tool_calls: &BTreeMap<String, u32>,
    ) -> Finding {
        let fresh = |f: &Finding| f.evidence.is_some_and(|id| id > self.acted_upto);
        if let Some(f) = check_repeated_messages(window).filter(fresh) {
            return f;
        }
        if let Some(f) = check_untooled_deliverable(window, op, tool_calls).filter(fresh) {
            return f;
        }

        let mut user = String::from("[watcher review]\n## QUERY\n");
        let _ = writeln!(user, "{} (task kind: {})", op.bound_query.text, op.bound_query.task_kind);
        let _ = writeln!(user, "\n## OPERATING PROCEDURE\n{}", to_fixture_text(&op.sop));
        let _ = writeln!(user, "\n## RECENT EVENTS");
        if window.is_empty() {
            let _ = writeln!(user, "(none)");
        }
        for e in window {
            render_event(&mut user, e);
        }
        if !pep_hits.is_empty() {
            let _ = writeln!(user, "\n## PAST EXPERIENCES");
            render_experiences(&mut user, pep_hits);
        }
        let prompt = self.gateway.prompt(self.prompts.watcher_review.clone(), user);
        match self.gateway.complete(&prompt) {
            Ok(reply) => parse_finding(&reply.text, op),
            Err(e) => {
                tracing::warn!(error = %e, "watcher review failed; continuing without intervention");
                Finding::normal()
            }
        }
    }

    /// Applies guidance or replacement for an anomalous finding.
    pub fn intervene(&mut self, finding: &Finding, state: &mut ExecutionState) -> Result<Intervention, WatcherError> {
        if !finding.is_anomaly() {
            return Err(WatcherError::NotAnAnomaly);
        }
        if state.interventions_used >= self.policy.cap {
            return Err(WatcherError::CapExceeded(self.policy.cap));
        }
        let agent = finding.agent.clone().ok_or(WatcherError::NotAnAnomaly)?;
        if state.op.agent(&agent).is_none() {
            return Err(WatcherError::UnknownAgent(agent));
        }
        let round = state.round;
        let (strategies, pep_refs) = matched_strategies(&self.pep_hits, &agent);

        let intervention = match finding.severity {
            Severity::Recoverable => {
                let mut text = format!("Watcher guidance: {}", finding.description);
                if strategies.is_empty() {
                    text.push_str("\nRe-read your instruction and the communication structure before acting again.");
                } else {
                    text.push_str("\nStrategies from past experience:");
                    for s in &strategies {
                        let _ = write!(text, "\n- {s}");
                    }
                }
                state
                    .post_guidance(&agent, text.clone())
                    .map_err(|e| WatcherError::Engine(e.to_string()))?;
                Intervention {
                    kind: InterventionKind::Guidance,
                    target: agent,
                    payload: InterventionPayload::Guidance(text),
                    round,
                    pep_refs,
                    generation: None,
                    repairs: 0,
                }
            }
            Severity::Critical => {
                let (spec, repairs) = self.replace_agent(&state.op, &agent, finding, &strategies)?;
                let (generation, report) = state
                    .replace_agent(&agent, spec.clone())
                    .map_err(|e| WatcherError::Engine(e.to_string()))?;
                tracing::info!(
                    agent = %agent,
                    generation,
                    messages_removed = report.messages_removed,
                    tool_records_removed = report.tool_records_removed,
                    "agent replaced"
                );
                Intervention {
                    kind: InterventionKind::Replacement,
                    target: agent,
                    payload: InterventionPayload::Replacement(spec),
                    round,
                    pep_refs,
                    generation: Some(generation),
                    repairs,
                }
            }
        };
        state
            .record_intervention(intervention.clone())
            .map_err(|e| WatcherError::Engine(e.to_string()))?;
        self.acted_upto = state.pool.last_message_id();
        Ok(intervention)
    }

    /// Asks the model for a fresh spec for `agent`'s slot. Missing name or
    /// tools default to the old ones; the result must validate in place.
    pub fn replace_agent(
        &self,
        op: &OperatingProcedure,
        agent: &str,
        finding: &Finding,
        strategies: &[&str],
    ) -> Result<(AgentSpec, u32), WatcherError> {
        let old = op.agent(agent).ok_or_else(|| WatcherError::UnknownAgent(agent.to_string()))?;
        let mut base = format!("[replace: {agent}]\n## FINDING\n{}\n", finding.description);
        let _ = writeln!(
            base,
            "\n## CURRENT SPECIFICATION\n{}",
            serde_json::to_string_pretty(old).expect("spec serializes")
        );
        let _ = writeln!(base, "\n## OPERATING PROCEDURE\n{}", to_fixture_text(&op.sop));
        let _ = writeln!(base, "\n## QUERY\n{}", op.bound_query.text);
        let tools: Vec<&str> = self.registry_tools.iter().map(String::as_str).collect();
        let _ = writeln!(base, "\n## AVAILABLE TOOLS\n{}", tools.join(", "));
        if !strategies.is_empty() {
            let _ = writeln!(base, "\n## STRATEGIES FROM PAST EXPERIENCE");
            for s in strategies {
                let _ = writeln!(base, "- {s}");
            }
        }

        let mut last_error = String::new();
        for attempt in 0..=REPAIR_BUDGET {
            let mut user = base.clone();
            if attempt > 0 {
                let _ = writeln!(user, "\n## PREVIOUS REPLY REJECTED\n{last_error}");
            }
            let reply = self.gateway.complete(&self.gateway.prompt(self.prompts.replacement.clone(), user))?;
            match self.accept_spec(op, old, &reply.text) {
                Ok(spec) => return Ok((spec, attempt)),
                Err(e) => last_error = e,
            }
        }
        Err(WatcherError::ReplacementFailed {
            agent: agent.to_string(),
            attempts: REPAIR_BUDGET + 1,
            reason: last_error,
        })
    }

    fn accept_spec(&self, op: &OperatingProcedure, old: &AgentSpec, reply: &str) -> Result<AgentSpec, String> {
        let mut v = extract_json_object(reply).map_err(|e| e.to_string())?;
        let obj = v.as_object_mut().ok_or("reply is not a JSON object")?;
        obj.insert("name".into(), old.name.clone().into());
        obj.entry("tools").or_insert_with(|| old.tools.clone().into());
        let spec = ingest_agent(&v, "agent").map_err(|e| e.to_string())?;
        if spec.instruction.trim().is_empty() {
            return Err("instruction is empty".into());
        }
        let mut candidate = op.clone();
        if let Some(slot) = candidate.sop.agent_mut(&old.name) {
            *slot = spec.clone();
        }
        let diagnostics = validate_op(&candidate, &self.registry_tools);
        if diagnostics.is_empty() {
            Ok(spec)
        } else {
            Err(diagnostics.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        }
    }

    fn review_and_act(&mut self, state: &mut ExecutionState, trigger: Trigger) -> Result<(), String> {
        let window = state.window(self.window_rounds());
        let tool_calls: BTreeMap<String, u32> = state
            .op
            .team()
            .iter()
            .map(|n| (n.clone(), state.agent_state(n).map_or(0, |a| a.tool_calls)))
            .collect();
        let finding = self.review(&window, &state.op, &self.pep_hits, &tool_calls);
        state.reviews.push(ReviewEntry {
            round: state.round,
            trigger: trigger.kind,
            anomaly: finding.is_anomaly(),
        });
        if !finding.is_anomaly() {
            return Ok(());
        }
        match self.intervene(&finding, state) {
            Ok(_) => Ok(()),
            Err(WatcherError::CapExceeded(_)) => Ok(()),
            Err(e @ (WatcherError::ReplacementFailed { .. } | WatcherError::Model(_))) => Err(e.to_string()),
            Err(e) => {
                tracing::warn!(error = %e, "intervention skipped");
                Ok(())
            }
        }
    }

    fn counters_check(&self, state: &ExecutionState, at_barrier: bool) -> Option<Trigger> {
        let env_steps = state.env_steps();
        should_intervene(
            &TriggerCounters {
                round: state.round,
                at_barrier,
                env_steps: &env_steps,
                interventions_used: state.interventions_used,
            },
            &self.policy,
            self.team_size,
        )
    }
}

impl Supervisor for Watcher<'_> {
    fn limits(&self) -> SupervisionLimits {
        SupervisionLimits {
            interval: self.policy.comm_interval(self.team_size),
            env_threshold: self.policy.env_threshold,
            cap: self.policy.cap,
        }
    }

    fn after_tool_call(&mut self, state: &mut ExecutionState, _agent: &str) -> Result<(), String> {
        match self.counters_check(state, false) {
            Some(t) => self.review_and_act(state, t),
            None => Ok(()),
        }
    }

    fn at_barrier(&mut self, state: &mut ExecutionState) -> Result<(), String> {
        match self.counters_check(state, true) {
            Some(t) => self.review_and_act(state, t),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AgentExperience, Message, Node, Query, TaskKind};

    fn counters(round: u32, at_barrier: bool, env: &BTreeMap<String, u32>, used: u32) -> TriggerCounters<'_> {
        TriggerCounters {
            round,
            at_barrier,
            env_steps: env,
            interventions_used: used,
        }
    }

    #[test]
    fn interval_is_half_the_team() {
        let p = InterventionPolicy::default();
        assert_eq!(p.comm_interval(6), 3);
        assert_eq!(p.comm_interval(5), 2);
        assert_eq!(p.comm_interval(1), 1);
        assert!((p.frequency(6) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn trigger_examples() {
        let p = InterventionPolicy::default();
        let quiet: BTreeMap<String, u32> = [("A".to_string(), 4)].into();
        let busy: BTreeMap<String, u32> = [("A".to_string(), 5)].into();
        assert_eq!(
            should_intervene(&counters(3, true, &quiet, 0), &p, 6).map(|t| t.kind),
            Some(TriggerKind::Round)
        );
        assert_eq!(should_intervene(&counters(2, true, &quiet, 0), &p, 6), None);
        assert_eq!(should_intervene(&counters(0, true, &quiet, 0), &p, 6), None);
        assert_eq!(
            should_intervene(&counters(2, false, &busy, 0), &p, 6),
            Some(Trigger {
                kind: TriggerKind::Env,
                agent: Some("A".into())
            })
        );
        assert_eq!(should_intervene(&counters(3, true, &busy, 8), &p, 6), None);
        assert_eq!(should_intervene(&counters(3, false, &busy, 8), &p, 6), None);
    }

    fn message(id: u64, from: &str, content: &str, kind: MessageKind) -> TranscriptEvent {
        TranscriptEvent::Message(Message {
            id,
            sender: Node::from(from),
            sender_gen: 0,
            recipient: Node::from("Other"),
            recipient_gen: 0,
            round: 1,
            kind,
            content: content.into(),
            cause: None,
            outcome: None,
            reposted: false,
        })
    }

    fn travel_op() -> OperatingProcedure {
        let mut sop = crate::domain::fixtures::web_search_qa();
        sop.agents[1].tools = vec!["search_stub".into()];
        OperatingProcedure::bind(sop, Query::new("q", "Plan a trip", TaskKind::Planning), vec![])
    }

    #[test]
    fn repeated_message_rule() {
        let window: Vec<_> = (1..=3)
            .map(|i| message(i, "Planner", "same plan", MessageKind::Task))
            .collect();
        let f = check_repeated_messages(&window).unwrap();
        assert_eq!(f.agent.as_deref(), Some("Planner"));
        assert_eq!(f.level, AnomalyLevel::InterAgent);
        assert_eq!(f.severity, Severity::Recoverable);
        assert!(check_repeated_messages(&window[..2]).is_none());
    }

    #[test]
    fn untooled_deliverable_rule() {
        let op = travel_op();
        let window = vec![message(4, "WebSearcher", "flight UA12 at 9am", MessageKind::Task)];
        let none: BTreeMap<String, u32> = BTreeMap::new();
        let f = check_untooled_deliverable(&window, &op, &none).unwrap();
        assert_eq!(f.level, AnomalyLevel::AgentEnvironment);
        assert_eq!(f.severity, Severity::Critical);
        let searched: BTreeMap<String, u32> = [("WebSearcher".to_string(), 1)].into();
        assert!(check_untooled_deliverable(&window, &op, &searched).is_none());
        let mut coding = op.clone();
        coding.bound_query.task_kind = TaskKind::Coding;
        assert!(check_untooled_deliverable(&window, &coding, &none).is_none());
    }

    #[test]
    fn reviewer_replies() {
        let op = travel_op();
        assert!(!parse_finding("NORMAL", &op).is_anomaly());
        assert!(!parse_finding("gibberish", &op).is_anomaly());
        let f = parse_finding(
            r#"{"verdict":"anomaly","level":"agent_environment","agent":"Summarizer","severity":"critical","description":"empty"}"#,
            &op,
        );
        assert_eq!(f.agent.as_deref(), Some("Summarizer"));
        assert_eq!(f.severity, Severity::Critical);
        let outsider = parse_finding(r#"{"verdict":"anomaly","agent":"Nobody"}"#, &op);
        assert!(!outsider.is_anomaly());
    }

    #[test]
    fn strategies_prefer_the_target_agent() {
        let rec = |id: &str, agent: &str, s: &str| PepRecord {
            id: id.into(),
            query: Query::new("x", "x", TaskKind::Planning),
            failure_cause: "c".into(),
            experiences: vec![AgentExperience {
                agent: agent.into(),
                error_attribution: "e".into(),
                improvement_strategy: s.into(),
            }],
            query_embedding: None,
        };
        let hits = vec![rec("pep-1", "Planner", "call the flight tool"), rec("pep-2", "Booker", "double check")];
        let (s, refs) = matched_strategies(&hits, "Planner");
        assert_eq!(s, vec!["call the flight tool"]);
        assert_eq!(refs, vec!["pep-1"]);
        let (s, refs) = matched_strategies(&hits, "Summarizer");
        assert_eq!(s.len(), 2);
        assert_eq!(refs.len(), 2);
    }
}
