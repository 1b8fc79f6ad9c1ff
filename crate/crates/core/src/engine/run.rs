//! The scheduling loop: sweeps over ready agents, applies their actions,
//! and hands control to a supervisor at barriers and after tool calls.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::action::{parse_action, Act, ActionContext};
use super::pool::{is_agent_action, MessagePool, PoolError, PurgeReport};
use super::tools::ToolRegistry;
use crate::domain::{
    AgentSpec, ExecutionTranscript, Intervention, Message, MessageKind, Node, OperatingProcedure, ReviewEntry,
    RunLimits, Termination, ToolCallRecord, ToolOutcome, TranscriptEvent,
};
use crate::gateway::{Gateway, GatewayError, ModelReply};
use crate::prompts::Prompts;

pub const DEFAULT_MAX_ROUNDS: u32 = 30;
const HISTORY_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnginePolicy {
    pub max_rounds: u32,
    /// Step the ready agents of a sweep concurrently. Actions are still
    /// applied in team order.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for EnginePolicy {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            parallel: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub tool: String,
    pub arguments: String,
    pub text: String,
    pub outcome: ToolOutcome,
}

/// Per-agent runtime state. Reset when the agent is replaced.
#[derive(Debug, Clone, Default)]
pub struct AgentState {
    pub generation: u32,
    pub consecutive_tool_steps: u32,
    /// Tool calls made by the current generation.
    pub tool_calls: u32,
    pending_observations: Vec<Observation>,
    feedback: Vec<String>,
    history: VecDeque<String>,
    last_seen: Option<u64>,
}

impl AgentState {
    fn fresh(generation: u32) -> Self {
        Self {
            generation,
            ..Self::default()
        }
    }

    fn remember(&mut self, round: u32, line: String) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(format!("round {round}: {line}"));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplaceError {
    #[error("agent `{0}` is not in the team")]
    UnknownAgent(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Everything a supervisor may inspect or change at a barrier.
#[derive(Debug)]
pub struct ExecutionState {
    pub op: OperatingProcedure,
    pub pool: MessagePool,
    agents: BTreeMap<String, AgentState>,
    pub round: u32,
    pub reviews: Vec<ReviewEntry>,
    pub interventions_used: u32,
    pub actions: u64,
    replaced_this_sweep: BTreeSet<String>,
}

impl ExecutionState {
    pub fn new(op: OperatingProcedure) -> Self {
        let agents = op.team().iter().map(|n| (n.clone(), AgentState::default())).collect();
        Self {
            op,
            pool: MessagePool::new(),
            agents,
            round: 0,
            reviews: Vec::new(),
            interventions_used: 0,
            actions: 0,
            replaced_this_sweep: BTreeSet::new(),
        }
    }

    pub fn agent_state(&self, name: &str) -> Option<&AgentState> {
        self.agents.get(name)
    }

    pub fn generation(&self, name: &str) -> u32 {
        self.agents.get(name).map_or(0, |a| a.generation)
    }

    /// Consecutive tool-interaction steps per agent.
    pub fn env_steps(&self) -> BTreeMap<String, u32> {
        self.agents
            .iter()
            .map(|(n, a)| (n.clone(), a.consecutive_tool_steps))
            .collect()
    }

    /// Events committed in the last `rounds` rounds (inclusive of the current one).
    pub fn window(&self, rounds: u32) -> Vec<TranscriptEvent> {
        let from = self.round.saturating_sub(rounds.saturating_sub(1));
        self.pool
            .events()
            .iter()
            .filter(|e| event_round(e) >= from)
            .cloned()
            .collect()
    }

    /// Delivers a watcher guidance message; it is read on the agent's next step.
    pub fn post_guidance(&mut self, target: &str, content: String) -> Result<u64, ReplaceError> {
        let generation = self
            .agents
            .get(target)
            .ok_or_else(|| ReplaceError::UnknownAgent(target.to_string()))?
            .generation;
        Ok(self.pool.post(Message {
            id: 0,
            sender: Node::Watcher,
            sender_gen: 0,
            recipient: Node::agent(target),
            recipient_gen: generation,
            round: self.round,
            kind: MessageKind::WatcherGuidance,
            content,
            cause: None,
            outcome: None,
            reposted: false,
        })?)
    }

    /// Swaps in `spec` for `name`: purges the old generation, installs the new
    /// spec under the same public name, and re-posts the last task message the
    /// old agent received so the workflow resumes.
    pub fn replace_agent(&mut self, name: &str, mut spec: AgentSpec) -> Result<(u32, PurgeReport), ReplaceError> {
        let old = self
            .agents
            .get(name)
            .ok_or_else(|| ReplaceError::UnknownAgent(name.to_string()))?
            .generation;
        let last_task = self
            .pool
            .messages()
            .filter(|m| {
                m.recipient.is_agent(name)
                    && m.recipient_gen == old
                    && m.kind == MessageKind::Task
                    && !m.sender.is_agent(name)
            })
            .last()
            .cloned();
        let report = self.pool.purge_agent(name, old);
        self.actions -= report.actions_removed;
        for a in self.agents.values_mut() {
            if a.last_seen.is_some_and(|id| self.pool.get(id).is_none()) {
                a.last_seen = None;
            }
        }

        let generation = old + 1;
        self.agents.insert(name.to_string(), AgentState::fresh(generation));
        spec.name = name.to_string();
        if let Some(slot) = self.op.sop.agent_mut(name) {
            *slot = spec;
        }
        if let Some(task) = last_task {
            self.pool.post(Message {
                id: 0,
                recipient_gen: generation,
                round: self.round,
                cause: None,
                reposted: true,
                ..task
            })?;
        }
        self.replaced_this_sweep.insert(name.to_string());
        Ok((generation, report))
    }

    pub fn record_intervention(&mut self, intervention: Intervention) -> Result<(), PoolError> {
        self.pool.record_intervention(intervention)?;
        self.interventions_used += 1;
        Ok(())
    }

    fn is_ready(&self, name: &str) -> bool {
        self.agents.get(name).is_some_and(|a| {
            !a.pending_observations.is_empty()
                || !a.feedback.is_empty()
                || self.pool.has_mail(name, a.generation)
        })
    }
}

pub(crate) fn event_round(e: &TranscriptEvent) -> u32 {
    match e {
        TranscriptEvent::Message(m) => m.round,
        TranscriptEvent::ToolCall(t) => t.round,
        TranscriptEvent::Intervention(i) => i.round,
    }
}

/// Limits a supervisor enforces, recorded in the transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervisionLimits {
    pub interval: u32,
    pub env_threshold: u32,
    pub cap: u32,
}

/// Hook invoked by the engine. An `Err` ends the run as a fatal error.
pub trait Supervisor {
    fn limits(&self) -> SupervisionLimits;

    fn after_tool_call(&mut self, state: &mut ExecutionState, agent: &str) -> Result<(), String>;

    fn at_barrier(&mut self, state: &mut ExecutionState) -> Result<(), String>;
}

struct Job {
    agent: String,
    generation: u32,
    prompt_user: String,
    prior_senders: BTreeSet<String>,
    cause: Option<u64>,
}

pub struct Engine<'a> {
    gateway: &'a Gateway,
    registry: &'a ToolRegistry,
    prompts: &'a Prompts,
    policy: EnginePolicy,
}

enum Stop {
    Final { agent: String, content: String },
    Fatal(String),
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a Gateway, registry: &'a ToolRegistry, prompts: &'a Prompts, policy: EnginePolicy) -> Self {
        Self {
            gateway,
            registry,
            prompts,
            policy,
        }
    }

    pub fn policy(&self) -> &EnginePolicy {
        &self.policy
    }

    pub fn run(&self, op: &OperatingProcedure, mut supervisor: Option<&mut dyn Supervisor>) -> ExecutionTranscript {
        let started = Instant::now();
        let max_rounds = self.policy.max_rounds.max(1);
        let limits = match supervisor.as_deref() {
            Some(s) => {
                let l = s.limits();
                RunLimits {
                    max_rounds,
                    watcher_enabled: true,
                    interval: l.interval,
                    env_threshold: l.env_threshold,
                    cap: l.cap,
                }
            }
            None => RunLimits {
                max_rounds,
                watcher_enabled: false,
                interval: 0,
                env_threshold: 0,
                cap: 0,
            },
        };
        let registry_tools = self.registry.names();
        let team: Vec<String> = op.team().to_vec();
        let mut st = ExecutionState::new(op.clone());

        let mut seeded = BTreeSet::new();
        for edge in op.structure().edges.iter().filter(|e| e.from == Node::User) {
            if let Node::Agent(name) = &edge.to {
                if seeded.insert(name.clone()) {
                    st.pool
                        .post(Message {
                            id: 0,
                            sender: Node::User,
                            sender_gen: 0,
                            recipient: edge.to.clone(),
                            recipient_gen: 0,
                            round: 0,
                            kind: MessageKind::Task,
                            content: op.bound_query.text.clone(),
                            cause: None,
                            outcome: edge.condition.clone(),
                            reposted: false,
                        })
                        .expect("fresh pool is open");
                }
            }
        }

        let stop = loop {
            if st.round >= max_rounds {
                break None;
            }
            let ready: Vec<String> = team.iter().filter(|n| st.is_ready(n)).cloned().collect();
            if ready.is_empty() {
                break Some(Stop::Fatal("stalled: no agent has pending input".into()));
            }
            st.round += 1;
            st.replaced_this_sweep.clear();

            let jobs: Vec<Job> = ready.iter().map(|name| self.prepare(&mut st, name)).collect();
            let replies = self.step_all(&jobs);

            let mut stop = None;
            for (job, reply) in jobs.iter().zip(replies) {
                if st.replaced_this_sweep.contains(&job.agent) || st.generation(&job.agent) != job.generation {
                    continue;
                }
                let reply = match reply {
                    Ok(r) => r,
                    Err(e) => {
                        stop = Some(Stop::Fatal(format!("model call for `{}` failed: {e}", job.agent)));
                        break;
                    }
                };
                if let Some(s) = self.apply(&mut st, job, &reply.text, &registry_tools, &mut supervisor) {
                    stop = Some(s);
                    break;
                }
            }
            if stop.is_some() {
                break stop;
            }
            if let Some(s) = supervisor.as_deref_mut() {
                if let Err(e) = s.at_barrier(&mut st) {
                    break Some(Stop::Fatal(e));
                }
            }
        };

        st.pool.close();
        let (terminated_by, final_answer, final_agent, error) = match stop {
            None => (Termination::RoundCap, None, None, None),
            Some(Stop::Final { agent, content }) => (Termination::FinalAnswer, Some(content), Some(agent), None),
            Some(Stop::Fatal(e)) => (Termination::FatalError, None, None, Some(e)),
        };
        ExecutionTranscript {
            op: op.clone(),
            events: st.pool.into_events(),
            final_answer,
            final_agent,
            rounds_used: st.round,
            terminated_by,
            error,
            actions: st.actions,
            reviews: st.reviews,
            limits,
            wall_time: started.elapsed(),
        }
    }

    /// Snapshots the agent's inbox and pending items and renders its prompt.
    fn prepare(&self, st: &mut ExecutionState, name: &str) -> Job {
        let round = st.round;
        let state = st.agents.get(name).expect("ready agents are team members");
        let generation = state.generation;
        let inbox = st.pool.inbox(name, generation);
        st.pool.consume(inbox.iter().map(|m| m.id));
        let prior_senders = st.pool.prior_senders(name, generation, round);

        let state = st.agents.get_mut(name).expect("ready agents are team members");
        let observations = std::mem::take(&mut state.pending_observations);
        let feedback = std::mem::take(&mut state.feedback);
        if let Some(last) = inbox.last() {
            state.last_seen = Some(last.id);
        }
        let cause = state.last_seen;
        let history: Vec<String> = state.history.iter().cloned().collect();

        let prompt_user = self.render_agent_prompt(&st.op, name, &inbox, &observations, &feedback, &history, &prior_senders);
        Job {
            agent: name.to_string(),
            generation,
            prompt_user,
            prior_senders,
            cause,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn render_agent_prompt(
        &self,
        op: &OperatingProcedure,
        name: &str,
        inbox: &[Message],
        observations: &[Observation],
        feedback: &[String],
        history: &[String],
        prior_senders: &BTreeSet<String>,
    ) -> String {
        let spec = op.agent(name);
        let mut p = String::new();
        let _ = writeln!(p, "[agent: {name}]");
        let _ = writeln!(p, "## ROLE");
        if let Some(spec) = spec {
            let _ = writeln!(p, "Responsibility: {}", spec.responsibility);
            let _ = writeln!(p, "Instruction: {}", spec.instruction);
        }
        let _ = writeln!(p, "\n## TEAM");
        let _ = writeln!(p, "Query: {}", op.bound_query.text);
        let _ = writeln!(p, "Members: {}", op.team().join(", "));
        let _ = writeln!(p, "Communication structure:\n{}", op.structure().render_text());
        let from = Node::agent(name);
        let outgoing: Vec<String> = op
            .structure()
            .edges
            .iter()
            .filter(|e| e.from == from)
            .map(|e| match &e.condition {
                Some(c) => format!("{} (outcome: {c})", e.to),
                None => e.to.to_string(),
            })
            .collect();
        let _ = writeln!(p, "You may send to: {}", outgoing.join(", "));
        if !prior_senders.is_empty() {
            let upstream: Vec<&str> = prior_senders.iter().map(String::as_str).collect();
            let _ = writeln!(p, "You may also reply to: {}", upstream.join(", "));
        }

        let _ = writeln!(p, "\n## TOOLS");
        match spec.map(|s| s.tools.as_slice()).unwrap_or_default() {
            [] => {
                let _ = writeln!(p, "(none)");
            }
            tools => {
                for t in tools {
                    let usage = self.registry.usage(t).unwrap_or("(unavailable)");
                    let _ = writeln!(p, "- {t}: {usage}");
                }
            }
        }

        let _ = writeln!(p, "\n## INBOX");
        if inbox.is_empty() {
            let _ = writeln!(p, "(empty)");
        }
        for m in inbox {
            let kind = serde_json::to_value(m.kind).expect("kind serializes");
            let kind = kind.as_str().unwrap_or_default();
            let _ = writeln!(p, "- #{} from {} ({kind}):\n{}", m.id, m.sender, m.content);
        }
        if !observations.is_empty() {
            let _ = writeln!(p, "\n## OBSERVATIONS");
            for o in observations {
                let status = match o.outcome {
                    ToolOutcome::Ok => "ok",
                    ToolOutcome::Error => "error",
                };
                let _ = writeln!(p, "- {} [{status}]:\n{}", o.tool, o.text);
            }
        }
        if !feedback.is_empty() {
            let _ = writeln!(p, "\n## ENGINE FEEDBACK");
            for f in feedback {
                let _ = writeln!(p, "- {f}");
            }
        }
        if !history.is_empty() {
            let _ = writeln!(p, "\n## YOUR RECENT ACTIONS");
            for h in history {
                let _ = writeln!(p, "- {h}");
            }
        }
        p
    }

    fn step_all(&self, jobs: &[Job]) -> Vec<Result<ModelReply, GatewayError>> {
        let call = |job: &Job| {
            let prompt = self.gateway.prompt(self.prompts.agent.clone(), job.prompt_user.clone());
            self.gateway.complete(&prompt)
        };
        if self.policy.parallel && jobs.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || call(j))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("agent step panicked"))
                    .collect()
            })
        } else {
            jobs.iter().map(call).collect()
        }
    }

    fn apply(
        &self,
        st: &mut ExecutionState,
        job: &Job,
        reply: &str,
        registry_tools: &BTreeSet<String>,
        supervisor: &mut Option<&mut dyn Supervisor>,
    ) -> Option<Stop> {
        let round = st.round;
        let name = job.agent.as_str();
        let parsed = parse_action(
            reply,
            &ActionContext {
                op: &st.op,
                sender: name,
                prior_senders: &job.prior_senders,
                registry_tools,
            },
        );
        let action = match parsed {
            Ok(a) => a,
            Err(e) => {
                let state = st.agents.get_mut(name).expect("team member");
                state.feedback.push(format!("Your last reply was not applied: {e}."));
                state.remember(round, format!("invalid reply ({e})"));
                return None;
            }
        };

        match action.act {
            Act::ToolCall { tool, arguments } => {
                let spec = st.op.agent(name).cloned().expect("team member has a spec");
                match self.registry.invoke(&spec, &tool, &arguments) {
                    Err(e) => {
                        let state = st.agents.get_mut(name).expect("team member");
                        state.feedback.push(format!("Your tool call was rejected: {e}."));
                        state.remember(round, format!("rejected tool call `{tool}`"));
                        None
                    }
                    Ok((text, outcome)) => {
                        let state = st.agents.get_mut(name).expect("team member");
                        state.consecutive_tool_steps += 1;
                        state.tool_calls += 1;
                        let step = state.consecutive_tool_steps;
                        state.remember(round, format!("tool: {tool} | args: {arguments}"));
                        state.pending_observations.push(Observation {
                            tool: tool.clone(),
                            arguments: arguments.clone(),
                            text: text.clone(),
                            outcome,
                        });
                        let record = ToolCallRecord {
                            agent: name.to_string(),
                            generation: job.generation,
                            tool,
                            arguments,
                            observation: text,
                            step,
                            outcome,
                            round,
                        };
                        if let Err(e) = st.pool.record_tool(record) {
                            return Some(Stop::Fatal(e.to_string()));
                        }
                        st.actions += 1;
                        match supervisor.as_deref_mut() {
                            Some(s) => s.after_tool_call(st, name).err().map(Stop::Fatal),
                            None => None,
                        }
                    }
                }
            }
            Act::SendMessage {
                recipient,
                kind,
                content,
                outcome,
            } => {
                let recipient_gen = st.generation(&recipient);
                let message = Message {
                    id: 0,
                    sender: Node::agent(name),
                    sender_gen: job.generation,
                    recipient: Node::agent(recipient.as_str()),
                    recipient_gen,
                    round,
                    kind,
                    content: content.clone(),
                    cause: job.cause.filter(|id| st.pool.get(*id).is_some()),
                    outcome,
                    reposted: false,
                };
                debug_assert!(is_agent_action(&message));
                if let Err(e) = st.pool.post(message) {
                    return Some(Stop::Fatal(e.to_string()));
                }
                st.actions += 1;
                let state = st.agents.get_mut(name).expect("team member");
                state.consecutive_tool_steps = 0;
                state.remember(round, format!("message to {recipient}: {content}"));
                None
            }
            Act::FinalAnswer { content } => {
                let message = Message {
                    id: 0,
                    sender: Node::agent(name),
                    sender_gen: job.generation,
                    recipient: Node::End,
                    recipient_gen: 0,
                    round,
                    kind: MessageKind::FinalAnswer,
                    content: content.clone(),
                    cause: job.cause.filter(|id| st.pool.get(*id).is_some()),
                    outcome: None,
                    reposted: false,
                };
                if let Err(e) = st.pool.post(message) {
                    return Some(Stop::Fatal(e.to_string()));
                }
                st.actions += 1;
                Some(Stop::Final {
                    agent: name.to_string(),
                    content,
                })
            }
        }
    }
}
