use std::collections::BTreeSet;
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};

use super::types::{Node, OperatingProcedure, Sop, RESERVED_NODE_NAMES};

/// One violated structural invariant, naming the offending element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "diagnostic", rename_all = "snake_case")]
pub enum Diagnostic {
    EmptyTeam,
    EmptyAgentName,
    ReservedAgentName { name: String },
    DuplicateAgent { name: String },
    TeamMismatch { team: Vec<String>, agents: Vec<String> },
    UnknownTool { agent: String, tool: String },
    UnknownNode { node: String },
    NoEntryEdge,
    NoExitEdge,
    EdgeIntoUser { from: String },
    EdgeFromEnd { to: String },
    UnconditionedCycle { agents: Vec<String> },
    EmptyQuery,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyTeam => write!(f, "team is empty"),
            Diagnostic::EmptyAgentName => write!(f, "an agent has an empty name"),
            Diagnostic::ReservedAgentName { name } => write!(f, "agent name `{name}` is reserved"),
            Diagnostic::DuplicateAgent { name } => write!(f, "agent `{name}` is defined more than once"),
            Diagnostic::TeamMismatch { team, agents } => {
                write!(f, "team {team:?} does not match agent specifications {agents:?}")
            }
            Diagnostic::UnknownTool { agent, tool } => {
                write!(f, "agent `{agent}` references unregistered tool `{tool}`")
            }
            Diagnostic::UnknownNode { node } => {
                write!(f, "edge endpoint `{node}` is not a team member, User or End")
            }
            Diagnostic::NoEntryEdge => write!(f, "no edge leaves User"),
            Diagnostic::NoExitEdge => write!(f, "no edge reaches End"),
            Diagnostic::EdgeIntoUser { from } => write!(f, "edge `{from} -> User` enters User"),
            Diagnostic::EdgeFromEnd { to } => write!(f, "edge `End -> {to}` leaves End"),
            Diagnostic::UnconditionedCycle { agents } => {
                write!(f, "cycle without condition labels through {agents:?}")
            }
            Diagnostic::EmptyQuery => write!(f, "bound query text is empty"),
        }
    }
}

/// Checks every SOP and communication-structure invariant. Returns an empty
/// list iff the SOP is well formed against `registry_tools`.
pub fn validate_sop(sop: &Sop, registry_tools: &BTreeSet<String>) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if sop.team.is_empty() {
        out.push(Diagnostic::EmptyTeam);
    }

    let mut seen = BTreeSet::new();
    for agent in &sop.agents {
        if agent.name.trim().is_empty() {
            out.push(Diagnostic::EmptyAgentName);
        } else if RESERVED_NODE_NAMES.contains(&agent.name.as_str()) {
            out.push(Diagnostic::ReservedAgentName {
                name: agent.name.clone(),
            });
        }
        if !seen.insert(agent.name.as_str()) {
            out.push(Diagnostic::DuplicateAgent {
                name: agent.name.clone(),
            });
        }
    }

    let agent_names: Vec<String> = sop.agents.iter().map(|a| a.name.clone()).collect();
    if sop.team != agent_names {
        out.push(Diagnostic::TeamMismatch {
            team: sop.team.clone(),
            agents: agent_names,
        });
    }

    for agent in &sop.agents {
        for tool in &agent.tools {
            if !registry_tools.contains(tool) {
                out.push(Diagnostic::UnknownTool {
                    agent: agent.name.clone(),
                    tool: tool.clone(),
                });
            }
        }
    }

    out.extend(validate_structure(sop));
    out
}

/// SOP invariants plus the binding of the OP to a non-empty query.
pub fn validate_op(op: &OperatingProcedure, registry_tools: &BTreeSet<String>) -> Vec<Diagnostic> {
    let mut out = validate_sop(&op.sop, registry_tools);
    if op.bound_query.text.trim().is_empty() {
        out.push(Diagnostic::EmptyQuery);
    }
    out
}

fn validate_structure(sop: &Sop) -> Vec<Diagnostic> {
    let structure = &sop.communication_structure;
    let mut out = Vec::new();

    let mut reported = BTreeSet::new();
    for e in &structure.edges {
        for n in [&e.from, &e.to] {
            let ok = match n {
                Node::User | Node::End => true,
                Node::Watcher => false,
                Node::Agent(name) => sop.team.contains(name),
            };
            if !ok && reported.insert(n.to_string()) {
                out.push(Diagnostic::UnknownNode { node: n.to_string() });
            }
        }
        if e.to == Node::User {
            out.push(Diagnostic::EdgeIntoUser {
                from: e.from.to_string(),
            });
        }
        if e.from == Node::End {
            out.push(Diagnostic::EdgeFromEnd { to: e.to.to_string() });
        }
    }
    if !structure.edges.iter().any(|e| e.from == Node::User) {
        out.push(Diagnostic::NoEntryEdge);
    }
    if !structure.edges.iter().any(|e| e.to == Node::End) {
        out.push(Diagnostic::NoExitEdge);
    }

    // Cycles are legal only when every edge on them carries a condition, so
    // strongly connected components of the unconditioned subgraph are errors.
    let mut graph: DiGraphMap<usize, ()> = DiGraphMap::new();
    let index_of = |n: &Node| n.agent_name().and_then(|a| sop.team.iter().position(|t| t == a));
    for i in 0..sop.team.len() {
        graph.add_node(i);
    }
    for e in structure.edges.iter().filter(|e| e.condition.is_none()) {
        if let (Some(a), Some(b)) = (index_of(&e.from), index_of(&e.to)) {
            graph.add_edge(a, b, ());
        }
    }
    let mut cycles: Vec<Vec<usize>> = tarjan_scc(&graph)
        .into_iter()
        .filter(|scc| scc.len() > 1 || graph.contains_edge(scc[0], scc[0]))
        .map(|mut scc| {
            scc.sort_unstable();
            scc
        })
        .collect();
    cycles.sort();
    for scc in cycles {
        out.push(Diagnostic::UnconditionedCycle {
            agents: scc.into_iter().map(|i| sop.team[i].clone()).collect(),
        });
    }
    out
}
