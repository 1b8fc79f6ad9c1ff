//! Parser for agent replies in `Thought: ... Action: ...` form.
//!
//! ```text
//! Thought: <free text>
//! Action: tool: <name> | args: <payload>
//! Action: message: <recipient> | <content>
//!         [outcome: <label>]        (selects a conditional edge)
//!         [kind: task|clarification|feedback]
//! Action: final: <content>
//! ```

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MessageKind, Node, OperatingProcedure};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAction {
    pub thought: String,
    pub act: Act,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "act", rename_all = "snake_case")]
pub enum Act {
    ToolCall {
        tool: String,
        arguments: String,
    },
    SendMessage {
        recipient: String,
        kind: MessageKind,
        content: String,
        outcome: Option<String>,
    },
    FinalAnswer {
        content: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("unknown recipient `{0}`")]
    UnknownRecipient(String),
    #[error("recipient `{0}` is neither a successor nor a previous sender")]
    RecipientNotReachable(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

/// What the parser needs to know about the sender's position in the team.
#[derive(Debug, Clone, Copy)]
pub struct ActionContext<'a> {
    pub op: &'a OperatingProcedure,
    pub sender: &'a str,
    /// Agents that have messaged `sender` so far (upstream replies are legal).
    pub prior_senders: &'a BTreeSet<String>,
    pub registry_tools: &'a BTreeSet<String>,
}

fn action_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\baction\s*:").expect("valid regex"))
}

fn second_action_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*action\s*:").expect("valid regex"))
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn clean_name(s: &str) -> String {
    s.trim().trim_matches(|c| c == '`' || c == '"' || c == '\'' || c == '*').trim().to_string()
}

/// Splits trailing `outcome:` / `kind:` lines off a message body.
fn split_options(body: &str) -> (String, Option<String>, Option<String>) {
    let mut lines: Vec<&str> = body.lines().collect();
    let mut outcome = None;
    let mut kind = None;
    while let Some(last) = lines.last() {
        let t = last.trim();
        if t.is_empty() {
            lines.pop();
        } else if let Some(v) = strip_prefix_ci(t, "outcome:") {
            outcome.get_or_insert_with(|| clean_name(v));
            lines.pop();
        } else if let Some(v) = strip_prefix_ci(t, "kind:") {
            kind.get_or_insert_with(|| clean_name(v));
            lines.pop();
        } else {
            break;
        }
    }
    (lines.join("\n").trim().to_string(), outcome, kind)
}

pub fn parse_action(text: &str, ctx: &ActionContext<'_>) -> Result<AgentAction, ActionError> {
    let m = action_re()
        .find(text)
        .ok_or_else(|| ActionError::MalformedAction("no `Action:` found".into()))?;
    let before = text[..m.start()].trim();
    let thought = strip_prefix_ci(before, "thought:").unwrap_or(before).trim().to_string();
    let body = text[m.end()..].trim();
    if second_action_re().is_match(body) {
        return Err(ActionError::MalformedAction("more than one action".into()));
    }

    let act = if let Some(rest) = strip_prefix_ci(body, "tool:") {
        let (name, args) = match rest.split_once('|') {
            Some((n, a)) => (n, a.trim()),
            None => (rest, ""),
        };
        let tool = clean_name(name);
        if tool.is_empty() {
            return Err(ActionError::MalformedAction("tool name is empty".into()));
        }
        if !ctx.registry_tools.contains(&tool) {
            return Err(ActionError::UnknownTool(tool));
        }
        let arguments = strip_prefix_ci(args, "args:").unwrap_or(args).trim().to_string();
        Act::ToolCall { tool, arguments }
    } else if let Some(rest) = strip_prefix_ci(body, "message:") {
        let (recipient, content) = rest
            .split_once('|')
            .ok_or_else(|| ActionError::MalformedAction("message needs `<recipient> | <content>`".into()))?;
        let recipient = clean_name(recipient);
        let (content, outcome, kind) = split_options(content);
        resolve_message(ctx, recipient, content, outcome, kind)?
    } else if let Some(rest) = strip_prefix_ci(body, "final:") {
        let content = rest.trim().to_string();
        if content.is_empty() {
            return Err(ActionError::MalformedAction("final answer is empty".into()));
        }
        if !ctx.op.structure().has_edge_to_end(ctx.sender) {
            return Err(ActionError::RecipientNotReachable("End".into()));
        }
        Act::FinalAnswer { content }
    } else {
        return Err(ActionError::MalformedAction(
            "action must start with `tool:`, `message:` or `final:`".into(),
        ));
    };
    Ok(AgentAction { thought, act })
}

fn resolve_message(
    ctx: &ActionContext<'_>,
    recipient: String,
    content: String,
    outcome: Option<String>,
    kind: Option<String>,
) -> Result<Act, ActionError> {
    match recipient.as_str() {
        "End" => {
            return Err(ActionError::MalformedAction(
                "deliver to End with `final:` instead of `message:`".into(),
            ))
        }
        "User" => return Err(ActionError::RecipientNotReachable(recipient)),
        _ => {}
    }
    if !ctx.op.team().contains(&recipient) {
        return Err(ActionError::UnknownRecipient(recipient));
    }
    if content.is_empty() {
        return Err(ActionError::MalformedAction("message content is empty".into()));
    }

    let from = Node::agent(ctx.sender);
    let to = Node::agent(recipient.as_str());
    let edges: Vec<_> = ctx.op.structure().edges_between(&from, &to).collect();
    // An outcome selects among conditioned edges; without one, an agent that
    // addresses a conditioned successor implicitly picks that edge's label.
    let (via_edge, outcome) = match &outcome {
        Some(o) => (
            edges
                .iter()
                .any(|e| e.condition.is_none() || e.condition.as_deref() == Some(o.as_str())),
            outcome.clone(),
        ),
        None => match edges.iter().find(|e| e.condition.is_none()) {
            Some(_) => (true, None),
            None => match edges.first() {
                Some(e) => (true, e.condition.clone()),
                None => (false, None),
            },
        },
    };
    let upstream = ctx.prior_senders.contains(&recipient);
    if !via_edge && !upstream {
        return Err(ActionError::RecipientNotReachable(recipient));
    }

    let kind = match kind {
        None if via_edge => MessageKind::Task,
        None => MessageKind::Clarification,
        Some(k) => match k.parse::<MessageKind>() {
            Ok(k @ (MessageKind::Task | MessageKind::Clarification | MessageKind::Feedback)) => k,
            _ => return Err(ActionError::MalformedAction(format!("message kind `{k}` not allowed"))),
        },
    };
    Ok(Act::SendMessage {
        recipient,
        kind,
        content,
        outcome: if via_edge { outcome } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{fixtures, AgentSpec, CommunicationStructure, Query, Sop, TaskKind};

    fn travel_op() -> OperatingProcedure {
        let agent = |n: &str, tools: &[&str]| AgentSpec {
            name: n.into(),
            responsibility: "r".into(),
            instruction: "i".into(),
            tools: tools.iter().map(|s| s.to_string()).collect(),
        };
        let sop = Sop {
            team: vec!["Planner".into(), "Booker".into(), "Stranger".into()],
            communication_structure: CommunicationStructure::parse_text(
                "User -> Planner; Planner -> Booker; Booker -> End; Stranger -> End",
            ),
            agents: vec![agent("Planner", &[]), agent("Booker", &["FlightSearch"]), agent("Stranger", &[])],
        };
        OperatingProcedure::bind(sop, Query::new("q", "trip", TaskKind::Planning), vec![])
    }

    fn ctx<'a>(
        op: &'a OperatingProcedure,
        sender: &'a str,
        prior: &'a BTreeSet<String>,
        tools: &'a BTreeSet<String>,
    ) -> ActionContext<'a> {
        ActionContext {
            op,
            sender,
            prior_senders: prior,
            registry_tools: tools,
        }
    }

    fn tools() -> BTreeSet<String> {
        ["FlightSearch".to_string()].into()
    }

    #[test]
    fn tool_call_on_one_line() {
        let op = travel_op();
        let prior = BTreeSet::new();
        let t = tools();
        let a = parse_action(
            "Thought: need flights. Action: tool: FlightSearch | args: SEA→NYC",
            &ctx(&op, "Booker", &prior, &t),
        )
        .unwrap();
        assert_eq!(a.thought, "need flights.");
        assert_eq!(
            a.act,
            Act::ToolCall {
                tool: "FlightSearch".into(),
                arguments: "SEA→NYC".into()
            }
        );
    }

    #[test]
    fn upstream_clarification_to_previous_sender() {
        let op = travel_op();
        let prior: BTreeSet<String> = ["Planner".to_string()].into();
        let t = tools();
        let a = parse_action(
            "Thought: unclear spec. Action: message: Planner | please clarify dates",
            &ctx(&op, "Booker", &prior, &t),
        )
        .unwrap();
        assert_eq!(
            a.act,
            Act::SendMessage {
                recipient: "Planner".into(),
                kind: MessageKind::Clarification,
                content: "please clarify dates".into(),
                outcome: None
            }
        );
    }

    #[test]
    fn unreachable_and_unknown_recipients() {
        let op = travel_op();
        let prior = BTreeSet::new();
        let t = tools();
        assert_eq!(
            parse_action("Action: message: Stranger | hi", &ctx(&op, "Planner", &prior, &t)),
            Err(ActionError::RecipientNotReachable("Stranger".into()))
        );
        assert_eq!(
            parse_action("Action: message: Nobody | hi", &ctx(&op, "Planner", &prior, &t)),
            Err(ActionError::UnknownRecipient("Nobody".into()))
        );
        assert_eq!(
            parse_action("Action: final: done", &ctx(&op, "Planner", &prior, &t)),
            Err(ActionError::RecipientNotReachable("End".into()))
        );
        assert_eq!(
            parse_action("Action: tool: sql | x", &ctx(&op, "Booker", &prior, &t)),
            Err(ActionError::UnknownTool("sql".into()))
        );
    }

    #[test]
    fn malformed_replies() {
        let op = travel_op();
        let prior = BTreeSet::new();
        let t = tools();
        let c = ctx(&op, "Planner", &prior, &t);
        assert!(matches!(parse_action("just chatting", &c), Err(ActionError::MalformedAction(_))));
        assert!(matches!(parse_action("Action: dance", &c), Err(ActionError::MalformedAction(_))));
        assert!(matches!(
            parse_action("Action: message: Booker | a\nAction: message: Booker | b", &c),
            Err(ActionError::MalformedAction(_))
        ));
        assert!(matches!(parse_action("Action: message: Booker hi", &c), Err(ActionError::MalformedAction(_))));
    }

    #[test]
    fn outcome_selects_conditional_edge() {
        let op = OperatingProcedure::bind(
            fixtures::coding_test_loop(),
            Query::new("q", "write f", TaskKind::Coding),
            vec![],
        );
        let prior = BTreeSet::new();
        let t = BTreeSet::new();
        let c = ctx(&op, "Test Analyst", &prior, &t);
        let a = parse_action("Thought: failing.\nAction: message: Programming Expert | test 2 fails\noutcome: errors", &c)
            .unwrap();
        assert_eq!(
            a.act,
            Act::SendMessage {
                recipient: "Programming Expert".into(),
                kind: MessageKind::Task,
                content: "test 2 fails".into(),
                outcome: Some("errors".into())
            }
        );
        assert_eq!(
            parse_action("Action: message: AnswerAgent | ok\noutcome: errors", &c),
            Err(ActionError::RecipientNotReachable("AnswerAgent".into()))
        );
        let inferred = parse_action("Action: message: AnswerAgent | all pass", &c).unwrap();
        assert!(matches!(inferred.act, Act::SendMessage { outcome: Some(ref o), .. } if o == "correct"));
    }

    #[test]
    fn multiline_final_keeps_code() {
        let op = OperatingProcedure::bind(
            fixtures::coding_test_loop(),
            Query::new("q", "write f", TaskKind::Coding),
            vec![],
        );
        let prior = BTreeSet::new();
        let t = BTreeSet::new();
        let a = parse_action(
            "Thought: done\nAction: final: ```python\ndef f():\n    return 1\n```",
            &ctx(&op, "AnswerAgent", &prior, &t),
        )
        .unwrap();
        assert_eq!(
            a.act,
            Act::FinalAnswer {
                content: "```python\ndef f():\n    return 1\n```".into()
            }
        );
    }
}
