//! Communication-graph queries and the textual edge notation used by
//! hand-written SOP files (`A -> B (if label) | C`).

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::types::{CommunicationStructure, Edge, Node};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructureError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

impl CommunicationStructure {
    /// Every node that appears as an edge endpoint, in first-seen order.
    pub fn nodes(&self) -> Vec<Node> {
        let mut out: Vec<Node> = Vec::new();
        for e in &self.edges {
            for n in [&e.from, &e.to] {
                if !out.contains(n) {
                    out.push(n.clone());
                }
            }
        }
        out
    }

    pub fn contains(&self, node: &Node) -> bool {
        self.edges.iter().any(|e| &e.from == node || &e.to == node)
    }

    /// Targets of the edges leaving `node` that match `outcome`.
    ///
    /// Unconditioned edges always match; conditioned edges match only when
    /// `outcome` equals their label verbatim.
    pub fn successors(&self, node: &Node, outcome: Option<&str>) -> Result<Vec<Node>, StructureError> {
        if !self.contains(node) {
            return Err(StructureError::UnknownNode(node.to_string()));
        }
        let mut out = Vec::new();
        for e in self.edges.iter().filter(|e| &e.from == node) {
            let matches = match (&e.condition, outcome) {
                (None, _) => true,
                (Some(label), Some(o)) => label == o,
                (Some(_), None) => false,
            };
            if matches && !out.contains(&e.to) {
                out.push(e.to.clone());
            }
        }
        Ok(out)
    }

    /// Edges from `from` to `to`, in declaration order.
    pub fn edges_between<'a>(&'a self, from: &'a Node, to: &'a Node) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| &e.from == from && &e.to == to)
    }

    pub fn has_edge_to_end(&self, agent: &str) -> bool {
        self.edges
            .iter()
            .any(|e| e.from.is_agent(agent) && e.to == Node::End)
    }

    /// Parses the textual notation, e.g.
    /// `"1. User -> Planner;\n2. Planner -> Coder (if ok) | End (if done)\n\n**Description:**\n..."`.
    pub fn parse_text(text: &str) -> Self {
        let (edge_part, description) = split_description(text);
        let mut edges = Vec::new();
        for clause in edge_part.split([';', '\n']) {
            let clause = numbering_re().replace(clause.trim(), "");
            let clause = clause.trim().trim_end_matches('.').trim();
            let Some((lhs, rhs)) = clause.split_once("->") else {
                continue;
            };
            let from = Node::from(lhs.trim());
            for target in rhs.split('|') {
                let target = target.trim();
                if target.is_empty() {
                    continue;
                }
                let edge = match condition_re().captures(target) {
                    Some(c) => Edge::new(from.clone(), c[1].trim()).when(c[2].trim()),
                    None => Edge::new(from.clone(), target),
                };
                edges.push(edge);
            }
        }
        Self {
            edges,
            description: description.to_string(),
        }
    }

    /// Renders the edge list in numbered textual notation, grouping
    /// consecutive edges that share a source with `|`.
    pub fn render_text(&self) -> String {
        let mut clauses: Vec<String> = Vec::new();
        let mut i = 0;
        while i < self.edges.len() {
            let from = &self.edges[i].from;
            let mut targets = Vec::new();
            while i < self.edges.len() && &self.edges[i].from == from {
                let e = &self.edges[i];
                targets.push(match &e.condition {
                    Some(c) => format!("{} (if {c})", e.to),
                    None => e.to.to_string(),
                });
                i += 1;
            }
            clauses.push(format!("{from} -> {}", targets.join(" | ")));
        }
        let n = clauses.len();
        let mut out = String::new();
        for (idx, clause) in clauses.iter().enumerate() {
            let end = if idx + 1 == n { "." } else { ";\n" };
            out.push_str(&format!("{}. {clause}{end}", idx + 1));
        }
        if !self.description.is_empty() {
            out.push_str("\n\n**Description:**\n");
            out.push_str(&self.description);
        }
        out
    }
}

fn split_description(text: &str) -> (&str, &str) {
    let lower = text.to_ascii_lowercase();
    for marker in ["**description:**", "description:"] {
        if let Some(pos) = lower.find(marker) {
            return (&text[..pos], text[pos + marker.len()..].trim());
        }
    }
    (text, "")
}

fn numbering_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+[.)]\s*").expect("valid regex"))
}

fn condition_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.*?)\s*\(\s*if\s+(.+?)\s*\)$").expect("valid regex"))
}
