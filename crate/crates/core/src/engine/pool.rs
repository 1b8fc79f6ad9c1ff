//! Global message pool and tool-usage history, kept as one journal of
//! transcript events in commit order.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Intervention, Message, TranscriptEvent, ToolCallRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("message pool is closed")]
    PoolClosed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgeReport {
    pub messages_removed: usize,
    pub tool_records_removed: usize,
    /// Surviving messages whose `cause` pointed at a removed message.
    pub causes_cleared: usize,
    /// Removed entries that were agent actions (tool calls and agent-sent messages).
    pub actions_removed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MessagePool {
    events: Vec<TranscriptEvent>,
    consumed: HashSet<u64>,
    next_id: u64,
    closed: bool,
}

/// True for messages an agent produced by acting (as opposed to seeds,
/// watcher guidance and re-posted copies).
pub(crate) fn is_agent_action(m: &Message) -> bool {
    m.sender.agent_name().is_some() && !m.reposted
}

impl MessagePool {
    pub fn new() -> Self {
        Self {
            next_id: 1,
            ..Self::default()
        }
    }

    /// Appends `message` with the next id (ids are never reused, even after a purge).
    pub fn post(&mut self, mut message: Message) -> Result<u64, PoolError> {
        if self.closed {
            return Err(PoolError::PoolClosed);
        }
        message.id = self.next_id;
        self.next_id += 1;
        let id = message.id;
        self.events.push(TranscriptEvent::Message(message));
        Ok(id)
    }

    /// Unconsumed messages addressed to `agent` at `generation`, in id order.
    pub fn inbox(&self, agent: &str, generation: u32) -> Vec<Message> {
        self.messages()
            .filter(|m| m.recipient.is_agent(agent) && m.recipient_gen == generation && !self.consumed.contains(&m.id))
            .cloned()
            .collect()
    }

    pub fn has_mail(&self, agent: &str, generation: u32) -> bool {
        self.messages()
            .any(|m| m.recipient.is_agent(agent) && m.recipient_gen == generation && !self.consumed.contains(&m.id))
    }

    pub fn consume(&mut self, ids: impl IntoIterator<Item = u64>) {
        self.consumed.extend(ids);
    }

    /// Team members that messaged `agent` at `generation` in a round before `before_round`.
    pub fn prior_senders(&self, agent: &str, generation: u32, before_round: u32) -> BTreeSet<String> {
        self.messages()
            .filter(|m| m.recipient.is_agent(agent) && m.recipient_gen == generation && m.round < before_round)
            .filter_map(|m| m.sender.agent_name().map(str::to_string))
            .collect()
    }

    pub fn record_tool(&mut self, record: ToolCallRecord) -> Result<(), PoolError> {
        if self.closed {
            return Err(PoolError::PoolClosed);
        }
        self.events.push(TranscriptEvent::ToolCall(record));
        Ok(())
    }

    pub fn record_intervention(&mut self, intervention: Intervention) -> Result<(), PoolError> {
        if self.closed {
            return Err(PoolError::PoolClosed);
        }
        self.events.push(TranscriptEvent::Intervention(intervention));
        Ok(())
    }

    /// Removes every message sent by or to `agent` at `generation` and every
    /// tool record it produced.
    pub fn purge_agent(&mut self, agent: &str, generation: u32) -> PurgeReport {
        let mut report = PurgeReport::default();
        let mut removed_ids = HashSet::new();
        self.events.retain(|e| match e {
            TranscriptEvent::Message(m) if m.references(agent, generation) => {
                removed_ids.insert(m.id);
                report.messages_removed += 1;
                if is_agent_action(m) {
                    report.actions_removed += 1;
                }
                false
            }
            TranscriptEvent::ToolCall(t) if t.agent == agent && t.generation == generation => {
                report.tool_records_removed += 1;
                report.actions_removed += 1;
                false
            }
            _ => true,
        });
        for e in &mut self.events {
            if let TranscriptEvent::Message(m) = e {
                if m.cause.is_some_and(|c| removed_ids.contains(&c)) {
                    m.cause = None;
                    report.causes_cleared += 1;
                }
            }
        }
        self.consumed.retain(|id| !removed_ids.contains(id));
        report
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TranscriptEvent> {
        self.events
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::Message(m) => Some(m),
            _ => None,
        })
    }

    pub fn tool_records(&self) -> impl Iterator<Item = &ToolCallRecord> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::ToolCall(t) => Some(t),
            _ => None,
        })
    }

    pub fn get(&self, id: u64) -> Option<&Message> {
        self.messages().find(|m| m.id == id)
    }

    pub fn last_message_id(&self) -> u64 {
        self.next_id - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{MessageKind, Node, ToolOutcome};

    fn msg(from: &str, to: &str, round: u32) -> Message {
        Message {
            id: 0,
            sender: Node::from(from),
            sender_gen: 0,
            recipient: Node::from(to),
            recipient_gen: 0,
            round,
            kind: MessageKind::Task,
            content: format!("{from} to {to}"),
            cause: None,
            outcome: None,
            reposted: false,
        }
    }

    #[test]
    fn ids_are_monotone() {
        let mut pool = MessagePool::new();
        let ids: Vec<u64> = (0..3).map(|_| pool.post(msg("A", "B", 1)).unwrap()).collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn empty_inbox() {
        let mut pool = MessagePool::new();
        pool.post(msg("A", "B", 1)).unwrap();
        assert!(pool.inbox("A", 0).is_empty());
        assert_eq!(pool.inbox("B", 0).len(), 1);
        pool.consume([1]);
        assert!(pool.inbox("B", 0).is_empty());
    }

    #[test]
    fn purge_removes_every_trace() {
        let mut pool = MessagePool::new();
        pool.post(msg("Planner", "Coder", 1)).unwrap();
        let mut reply = msg("Coder", "Tester", 2);
        reply.cause = Some(1);
        pool.post(reply).unwrap();
        let mut downstream = msg("Tester", "Planner", 3);
        downstream.cause = Some(2);
        pool.post(downstream).unwrap();
        pool.record_tool(ToolCallRecord {
            agent: "Coder".into(),
            generation: 0,
            tool: "bash".into(),
            arguments: "ls".into(),
            observation: "".into(),
            step: 1,
            outcome: ToolOutcome::Ok,
            round: 2,
        })
        .unwrap();

        let report = pool.purge_agent("Coder", 0);
        assert_eq!(report.messages_removed, 2);
        assert_eq!(report.tool_records_removed, 1);
        assert_eq!(report.causes_cleared, 1);
        assert_eq!(report.actions_removed, 3);
        let text = serde_json::to_string(pool.events()).unwrap();
        assert!(!text.contains("Coder"));
        assert_eq!(pool.post(msg("A", "B", 4)).unwrap(), 4);
    }

    #[test]
    fn closed_pool_rejects_posts() {
        let mut pool = MessagePool::new();
        pool.close();
        assert_eq!(pool.post(msg("A", "B", 1)), Err(PoolError::PoolClosed));
    }

    #[test]
    fn prior_senders_respect_round_and_generation() {
        let mut pool = MessagePool::new();
        pool.post(msg("Planner", "Booker", 1)).unwrap();
        pool.post(msg("User", "Booker", 0)).unwrap();
        let mut late = msg("Stranger", "Booker", 2);
        late.recipient_gen = 0;
        pool.post(late).unwrap();
        let s = pool.prior_senders("Booker", 0, 2);
        assert_eq!(s, ["Planner".to_string()].into());
        assert!(pool.prior_senders("Booker", 1, 9).is_empty());
    }
}
