//! Execution transcripts and their JSONL encoding.
//!
//! A transcript file holds one record per committed event (message, tool
//! call, intervention) in commit order, followed by a single summary
//! record. Wall-clock time is deliberately not part of the file so that
//! scripted runs reproduce byte for byte.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::{AgentSpec, Message, OperatingProcedure, ToolCallRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Guidance,
    Replacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionPayload {
    Guidance(String),
    Replacement(AgentSpec),
}

/// An action taken by the watcher.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub target: String,
    pub payload: InterventionPayload,
    pub round: u32,
    #[serde(default)]
    pub pep_refs: Vec<String>,
    /// Generation installed by a replacement; every older generation of
    /// `target` has been purged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<u32>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub repairs: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Message(Message),
    ToolCall(ToolCallRecord),
    Intervention(Intervention),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FinalAnswer,
    RoundCap,
    FatalError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Round,
    Env,
}

/// One watcher review: when it ran and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub round: u32,
    pub trigger: TriggerKind,
    pub anomaly: bool,
}

/// Limits in force during the run, recorded so replay can check them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLimits {
    pub max_rounds: u32,
    pub watcher_enabled: bool,
    pub interval: u32,
    pub env_threshold: u32,
    pub cap: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTranscript {
    pub op: OperatingProcedure,
    pub events: Vec<TranscriptEvent>,
    pub final_answer: Option<String>,
    pub final_agent: Option<String>,
    pub rounds_used: u32,
    pub terminated_by: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Number of agent actions applied (tool calls, messages and final answers).
    pub actions: u64,
    #[serde(default)]
    pub reviews: Vec<ReviewEntry>,
    pub limits: RunLimits,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Serialize, Deserialize)]
struct SummaryRecord {
    #[serde(rename = "type")]
    kind: String,
    op: OperatingProcedure,
    final_answer: Option<String>,
    final_agent: Option<String>,
    rounds_used: u32,
    terminated_by: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    actions: u64,
    reviews: Vec<ReviewEntry>,
    limits: RunLimits,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript is empty")]
    Empty,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing trailing summary record")]
    MissingSummary,
    #[error("line {0}: record after the summary")]
    TrailingRecord(usize),
}

impl ExecutionTranscript {
    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::Message(m) => Some(m),
            _ => None,
        })
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCallRecord> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::ToolCall(t) => Some(t),
            _ => None,
        })
    }

    pub fn interventions(&self) -> impl Iterator<Item = &Intervention> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::Intervention(i) => Some(i),
            _ => None,
        })
    }

    /// The procedure as it stood at the end of the run, with every
    /// replacement spec swapped in.
    pub fn effective_op(&self) -> OperatingProcedure {
        let mut op = self.op.clone();
        for i in self.interventions() {
            if let InterventionPayload::Replacement(spec) = &i.payload {
                if let Some(slot) = op.sop.agent_mut(&i.target) {
                    *slot = AgentSpec {
                        name: i.target.clone(),
                        ..spec.clone()
                    };
                }
            }
        }
        op
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("transcript events serialize"));
            out.push('\n');
        }
        let summary = SummaryRecord {
            kind: "summary".into(),
            op: self.op.clone(),
            final_answer: self.final_answer.clone(),
            final_agent: self.final_agent.clone(),
            rounds_used: self.rounds_used,
            terminated_by: self.terminated_by,
            error: self.error.clone(),
            actions: self.actions,
            reviews: self.reviews.clone(),
            limits: self.limits.clone(),
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(TranscriptError::Empty);
        }
        let mut events = Vec::new();
        let mut summary: Option<SummaryRecord> = None;
        for (line, raw) in lines {
            if summary.is_some() {
                return Err(TranscriptError::TrailingRecord(line));
            }
            let value: serde_json::Value =
                serde_json::from_str(raw).map_err(|source| TranscriptError::Json { line, source })?;
            if value.get("type").and_then(|t| t.as_str()) == Some("summary") {
                summary = Some(
                    serde_json::from_value(value).map_err(|source| TranscriptError::Json { line, source })?,
                );
            } else {
                events.push(
                    serde_json::from_value(value).map_err(|source| TranscriptError::Json { line, source })?,
                );
            }
        }
        let s = summary.ok_or(TranscriptError::MissingSummary)?;
        Ok(Self {
            op: s.op,
            events,
            final_answer: s.final_answer,
            final_agent: s.final_agent,
            rounds_used: s.rounds_used,
            terminated_by: s.terminated_by,
            error: s.error,
            actions: s.actions,
            reviews: s.reviews,
            limits: s.limits,
            wall_time: Duration::ZERO,
        })
    }
}
