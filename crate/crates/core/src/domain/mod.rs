//! Shared data types, structural validation, and SOP document ingestion.

mod ingest;
mod structure;
mod transcript;
mod types;
mod validate;

pub use ingest::{
    extract_json_object, ingest_agent, ingest_sop, parse_sop_text, to_fixture_text, to_fixture_value, ParseError,
};
pub use structure::StructureError;
pub use transcript::{
    ExecutionTranscript, Intervention, InterventionKind, InterventionPayload, ReviewEntry, RunLimits,
    Termination, TranscriptError, TranscriptEvent, TriggerKind,
};
pub use types::{
    AgentExperience, AgentSpec, CommunicationStructure, Edge, Evaluator, Message, MessageKind, NeedAnalysis, Node,
    OperatingProcedure, PepRecord, Query, Sop, SopCase, TaskKind, ToolCallRecord, ToolOutcome, Verdict,
    RESERVED_NODE_NAMES,
};
pub use validate::{validate_op, validate_sop, Diagnostic};

/// Canonical JSON for any serializable domain value (pretty, stable key order).
pub fn to_canonical_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("domain values always serialize");
    s.push('\n');
    s
}

/// Reference SOP documents bundled with the crate, exactly as authored.
pub mod fixtures {
    use super::{parse_sop_text, Sop};

    /// Planner -> WebSearcher -> Summarizer pipeline for open-domain QA.
    pub const WEB_SEARCH_QA: &str = include_str!("../../assets/sops/web_search_qa.json");
    /// Programming Expert / Test Analyst loop with an AnswerAgent submitter.
    pub const CODING_TEST_LOOP: &str = include_str!("../../assets/sops/coding_test_loop.json");

    pub fn web_search_qa() -> Sop {
        parse_sop_text(WEB_SEARCH_QA).expect("bundled SOP parses")
    }

    pub fn coding_test_loop() -> Sop {
        parse_sop_text(CODING_TEST_LOOP).expect("bundled SOP parses")
    }
}
