use std::fmt;

use serde::{Deserialize, Serialize};

/// Broad category of a query. Drives bootstrap strategy and the watcher's
/// tool-usage expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Planning,
    Qa,
    Coding,
    #[default]
    Other,
}

impl TaskKind {
    /// Task kinds whose deliverables are expected to be grounded in tool output.
    pub fn requires_tools(self) -> bool {
        matches!(self, TaskKind::Planning | TaskKind::Qa)
    }

    pub fn is_tool_rich(self) -> bool {
        self.requires_tools()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Planning => "planning",
            TaskKind::Qa => "qa",
            TaskKind::Coding => "coding",
            TaskKind::Other => "other",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "planning" => Ok(TaskKind::Planning),
            "qa" => Ok(TaskKind::Qa),
            "coding" => Ok(TaskKind::Coding),
            "other" => Ok(TaskKind::Other),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub task_kind: TaskKind,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>, task_kind: TaskKind) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            task_kind,
        }
    }
}

/// Model-produced summary of a query's objective and required capabilities.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeedAnalysis {
    pub text: String,
}

impl NeedAnalysis {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub responsibility: String,
    pub instruction: String,
    #[serde(default)]
    pub tools: Vec<String>,
}

/// A node of the communication graph: a team member or one of the
/// reserved pseudo-nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    User,
    End,
    Watcher,
    Agent(String),
}

pub const RESERVED_NODE_NAMES: [&str; 3] = ["User", "End", "Watcher"];

impl Node {
    pub fn agent(name: impl Into<String>) -> Self {
        Node::from(name.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            Node::User => "User",
            Node::End => "End",
            Node::Watcher => "Watcher",
            Node::Agent(name) => name,
        }
    }

    pub fn agent_name(&self) -> Option<&str> {
        match self {
            Node::Agent(name) => Some(name),
            _ => None,
        }
    }

    pub fn is_agent(&self, name: &str) -> bool {
        matches!(self, Node::Agent(n) if n == name)
    }
}

impl From<String> for Node {
    fn from(s: String) -> Self {
        match s.as_str() {
            "User" => Node::User,
            "End" => Node::End,
            "Watcher" => Node::Watcher,
            _ => Node::Agent(s),
        }
    }
}

impl From<&str> for Node {
    fn from(s: &str) -> Self {
        Node::from(s.to_string())
    }
}

impl From<Node> for String {
    fn from(n: Node) -> Self {
        n.as_str().to_string()
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Node {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer).map(Node::from)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

impl Edge {
    pub fn new(from: impl Into<Node>, to: impl Into<Node>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            condition: None,
        }
    }

    pub fn when(mut self, condition: impl Into<String>) -> Self {
        self.condition = Some(condition.into());
        self
    }
}

/// Directed communication graph. The edge list is authoritative; the
/// description is documentation only.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommunicationStructure {
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sop {
    pub team: Vec<String>,
    pub communication_structure: CommunicationStructure,
    pub agents: Vec<AgentSpec>,
}

impl Sop {
    pub fn agent(&self, name: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.name == name)
    }

    pub fn agent_mut(&mut self, name: &str) -> Option<&mut AgentSpec> {
        self.agents.iter_mut().find(|a| a.name == name)
    }

    pub fn team_size(&self) -> usize {
        self.team.len()
    }

    /// All tool names referenced by any agent, deduplicated, in first-seen order.
    pub fn tools(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for tool in self.agents.iter().flat_map(|a| a.tools.iter()) {
            if !out.contains(tool) {
                out.push(tool.clone());
            }
        }
        out
    }
}

/// One repository entry: the query, its need analysis, and the pattern that solved it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopCase {
    pub id: String,
    pub query: Query,
    pub need: NeedAnalysis,
    pub sop: Sop,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub need_embedding: Option<Vec<f64>>,
    pub created_at: String,
}

/// An SOP bound to one concrete query: the executable plan for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatingProcedure {
    #[serde(flatten)]
    pub sop: Sop,
    pub bound_query: Query,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl OperatingProcedure {
    pub fn bind(sop: Sop, query: Query, provenance: Vec<String>) -> Self {
        Self {
            sop,
            bound_query: query,
            provenance,
        }
    }

    pub fn team(&self) -> &[String] {
        &self.sop.team
    }

    pub fn structure(&self) -> &CommunicationStructure {
        &self.sop.communication_structure
    }

    pub fn agent(&self, name: &str) -> Option<&AgentSpec> {
        self.sop.agent(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Task,
    Clarification,
    Feedback,
    WatcherGuidance,
    FinalAnswer,
}

impl std::str::FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "task" => Ok(MessageKind::Task),
            "clarification" => Ok(MessageKind::Clarification),
            "feedback" => Ok(MessageKind::Feedback),
            "watcher_guidance" => Ok(MessageKind::WatcherGuidance),
            "final_answer" => Ok(MessageKind::FinalAnswer),
            other => Err(format!("unknown message kind `{other}`")),
        }
    }
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

fn is_false(v: &bool) -> bool {
    !*v
}

/// Unit of the global message pool.
///
/// `sender_gen` / `recipient_gen` carry the internal generation of an agent
/// that has been replaced; public names stay stable across replacements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub sender: Node,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sender_gen: u32,
    pub recipient: Node,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub recipient_gen: u32,
    pub round: u32,
    pub kind: MessageKind,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    /// Set on the task message re-delivered to a replacement agent.
    #[serde(default, skip_serializing_if = "is_false")]
    pub reposted: bool,
}

impl Message {
    pub fn references(&self, agent: &str, generation: u32) -> bool {
        (self.sender.is_agent(agent) && self.sender_gen == generation)
            || (self.recipient.is_agent(agent) && self.recipient_gen == generation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolOutcome {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub agent: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub generation: u32,
    pub tool: String,
    pub arguments: String,
    pub observation: String,
    pub step: u32,
    pub outcome: ToolOutcome,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentExperience {
    pub agent: String,
    pub error_attribution: String,
    pub improvement_strategy: String,
}

/// Experience-pool entry: query, failure cause, and agent-wise experiences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PepRecord {
    #[serde(default)]
    pub id: String,
    pub query: Query,
    pub failure_cause: String,
    pub experiences: Vec<AgentExperience>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    Checker,
    ModelJudge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
    pub evaluator: Evaluator,
}
