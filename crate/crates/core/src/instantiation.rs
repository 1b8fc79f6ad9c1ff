//! From query to validated operating procedure: need analysis, exemplar
//! selection and model-driven instantiation with bounded repair.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::domain::{
    extract_json_object, ingest_sop, to_fixture_text, validate_sop, Diagnostic, NeedAnalysis, OperatingProcedure,
    ParseError, Query, Sop,
};
use crate::gateway::{Gateway, GatewayError};
use crate::prompts::Prompts;

pub const DEFAULT_REPAIR_BUDGET: u32 = 2;

#[derive(Debug, Error)]
pub enum InstantiationError {
    #[error("model error: {0}")]
    Model(#[from] GatewayError),
    #[error("model returned an empty need analysis twice")]
    EmptyReply,
    #[error("could not parse an operating procedure after {attempts} attempts: {error}")]
    ParseFailed { attempts: u32, error: ParseError },
    #[error("operating procedure failed validation after {attempts} attempts: {}", join_diagnostics(.diagnostics))]
    ValidationFailed {
        attempts: u32,
        diagnostics: Vec<Diagnostic>,
    },
}

pub(crate) fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// A retrieved SOP offered to the model as a reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub case_id: String,
    pub sop: Sop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstantiationMode {
    /// Model instantiation with whatever exemplars were retrieved.
    Normal,
    /// Model instantiation without exemplars.
    NoSopRag,
    /// Bind the given SOP to the query verbatim, without a model call.
    FixedSop(Exemplar),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instantiated {
    pub op: OperatingProcedure,
    /// Model calls beyond the first.
    pub repairs: u32,
}

/// Extracts the first JSON object from `text` and binds it to `query`.
pub fn parse_op(text: &str, query: &Query) -> Result<OperatingProcedure, ParseError> {
    let value = extract_json_object(text)?;
    let sop = ingest_sop(&value)?;
    Ok(OperatingProcedure::bind(sop, query.clone(), Vec::new()))
}

enum Rejection {
    Parse(ParseError),
    Invalid(Vec<Diagnostic>),
}

impl Rejection {
    fn describe(&self) -> String {
        match self {
            Rejection::Parse(e) => format!("parse error: {e}"),
            Rejection::Invalid(d) => format!("validation errors: {}", join_diagnostics(d)),
        }
    }
}

pub struct Instantiator<'a> {
    gateway: &'a Gateway,
    prompts: &'a Prompts,
    registry_tools: &'a BTreeSet<String>,
    repair_budget: u32,
}

impl<'a> Instantiator<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a Prompts, registry_tools: &'a BTreeSet<String>) -> Self {
        Self {
            gateway,
            prompts,
            registry_tools,
            repair_budget: DEFAULT_REPAIR_BUDGET,
        }
    }

    pub fn with_repair_budget(mut self, budget: u32) -> Self {
        self.repair_budget = budget;
        self
    }

    pub fn analyze_need(&self, query: &Query) -> Result<NeedAnalysis, InstantiationError> {
        let user = format!(
            "[need analysis]\n## QUERY\n{}\n(task kind: {})\n",
            query.text, query.task_kind
        );
        for _ in 0..2 {
            let reply = self
                .gateway
                .complete(&self.gateway.prompt(self.prompts.need_analysis.clone(), user.clone()))?;
            let need = NeedAnalysis::new(reply.text.trim());
            if !need.is_empty() {
                return Ok(need);
            }
        }
        Err(InstantiationError::EmptyReply)
    }

    pub fn instantiate(
        &self,
        query: &Query,
        need: &NeedAnalysis,
        exemplars: &[Exemplar],
        mode: &InstantiationMode,
        hint: Option<&str>,
    ) -> Result<Instantiated, InstantiationError> {
        let exemplars = match mode {
            InstantiationMode::FixedSop(fixed) => {
                let op = OperatingProcedure::bind(fixed.sop.clone(), query.clone(), vec![fixed.case_id.clone()]);
                let diagnostics = validate_sop(&op.sop, self.registry_tools);
                if !diagnostics.is_empty() {
                    return Err(InstantiationError::ValidationFailed {
                        attempts: 0,
                        diagnostics,
                    });
                }
                return Ok(Instantiated { op, repairs: 0 });
            }
            InstantiationMode::NoSopRag => &[][..],
            InstantiationMode::Normal => exemplars,
        };

        let base = self.render_request(query, need, exemplars, hint);
        let mut rejection = None;
        for attempt in 0..=self.repair_budget {
            let mut user = base.clone();
            if let Some(r) = &rejection {
                let _ = writeln!(
                    user,
                    "\n## PREVIOUS REPLY REJECTED\n{}\nReply again with one corrected JSON object.",
                    Rejection::describe(r)
                );
            }
            let reply = self
                .gateway
                .complete(&self.gateway.prompt(self.prompts.instantiate.clone(), user))?;
            match parse_op(&reply.text, query) {
                Err(e) => rejection = Some(Rejection::Parse(e)),
                Ok(mut op) => {
                    let diagnostics = validate_sop(&op.sop, self.registry_tools);
                    if diagnostics.is_empty() {
                        op.provenance = exemplars.iter().map(|e| e.case_id.clone()).collect();
                        return Ok(Instantiated { op, repairs: attempt });
                    }
                    rejection = Some(Rejection::Invalid(diagnostics));
                }
            }
        }
        let attempts = self.repair_budget + 1;
        Err(match rejection.expect("at least one attempt ran") {
            Rejection::Parse(error) => InstantiationError::ParseFailed { attempts, error },
            Rejection::Invalid(diagnostics) => InstantiationError::ValidationFailed { attempts, diagnostics },
        })
    }

    fn render_request(&self, query: &Query, need: &NeedAnalysis, exemplars: &[Exemplar], hint: Option<&str>) -> String {
        let mut user = String::from("[instantiate]\n## QUERY\n");
        let _ = writeln!(user, "{}\n(task kind: {})", query.text, query.task_kind);
        if !need.is_empty() {
            let _ = writeln!(user, "\n## NEED ANALYSIS\n{}", need.text);
        }
        let tools: Vec<&str> = self.registry_tools.iter().map(String::as_str).collect();
        let _ = writeln!(user, "\n## AVAILABLE TOOLS\n{}", tools.join(", "));
        if !exemplars.is_empty() {
            let _ = writeln!(user, "\n## REFERENCE SOPS");
            for (i, e) in exemplars.iter().enumerate() {
                let _ = writeln!(user, "### Reference {} ({})\n{}", i + 1, e.case_id, to_fixture_text(&e.sop));
            }
        }
        if let Some(h) = hint {
            let _ = writeln!(user, "\n## TEAM DESIGN\n{h}");
        }
        user
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{fixtures, TaskKind};
    use crate::gateway::{Matcher, ScriptRule};

    fn tools() -> BTreeSet<String> {
        ["bash", "GOOGLE Search"].iter().map(|s| s.to_string()).collect()
    }

    fn coding_query() -> Query {
        Query::new("q1", "Write a function that adds two numbers.", TaskKind::Coding)
    }

    #[test]
    fn need_analysis_retries_once_on_empty_reply() {
        let gw = Gateway::scripted(vec![
            ScriptRule::on("## NEED ANALYSIS", "   ").once(),
            ScriptRule::on("## NEED ANALYSIS", "needs bash to run tests"),
        ]);
        let p = Prompts::default();
        let t = tools();
        let n = Instantiator::new(&gw, &p, &t).analyze_need(&coding_query()).unwrap();
        assert_eq!(n.text, "needs bash to run tests");
        assert_eq!(gw.calls(), 2);

        let silent = Gateway::scripted(vec![ScriptRule::on("## NEED ANALYSIS", "")]);
        assert!(matches!(
            Instantiator::new(&silent, &p, &t).analyze_need(&coding_query()),
            Err(InstantiationError::EmptyReply)
        ));
        let none = Gateway::scripted(vec![]);
        assert!(matches!(
            Instantiator::new(&none, &p, &t).analyze_need(&coding_query()),
            Err(InstantiationError::Model(GatewayError::NoRuleMatched))
        ));
    }

    #[test]
    fn coding_reply_yields_conditional_loop() {
        let gw = Gateway::scripted(vec![ScriptRule::on("## INSTANTIATE", fixtures::CODING_TEST_LOOP)]);
        let p = Prompts::default();
        let t = tools();
        let out = Instantiator::new(&gw, &p, &t)
            .instantiate(&coding_query(), &NeedAnalysis::new("tests"), &[], &InstantiationMode::Normal, None)
            .unwrap();
        assert_eq!(out.op.team().len(), 3);
        assert_eq!(out.repairs, 0);
        assert!(out.op.structure().edges.iter().any(|e| e.condition.as_deref() == Some("errors")));
        assert_eq!(out.op.bound_query, coding_query());
    }

    #[test]
    fn fixed_mode_binds_without_model_call() {
        let gw = Gateway::scripted(vec![]);
        let p = Prompts::default();
        let t = tools();
        let fixed = Exemplar {
            case_id: "sop-000001".into(),
            sop: fixtures::web_search_qa(),
        };
        let q = Query::new("q2", "Who wrote Hamlet?", TaskKind::Qa);
        let out = Instantiator::new(&gw, &p, &t)
            .instantiate(&q, &NeedAnalysis::default(), &[], &InstantiationMode::FixedSop(fixed), None)
            .unwrap();
        assert_eq!(out.op.sop, fixtures::web_search_qa());
        assert_eq!(out.op.bound_query, q);
        assert_eq!(out.op.provenance, vec!["sop-000001"]);
        assert_eq!(gw.calls(), 0);
    }

    #[test]
    fn missing_team_is_repaired_once() {
        let broken = fixtures::CODING_TEST_LOOP.replacen("\"team\"", "\"squad\"", 1);
        let gw = Gateway::scripted(vec![
            ScriptRule::new(Matcher::all(["## INSTANTIATE", "PREVIOUS REPLY REJECTED"]), fixtures::CODING_TEST_LOOP),
            ScriptRule::on("## INSTANTIATE", broken),
        ]);
        let p = Prompts::default();
        let t = tools();
        let exemplars = vec![Exemplar {
            case_id: "sop-000007".into(),
            sop: fixtures::coding_test_loop(),
        }];
        let out = Instantiator::new(&gw, &p, &t)
            .instantiate(&coding_query(), &NeedAnalysis::new("n"), &exemplars, &InstantiationMode::Normal, None)
            .unwrap();
        assert_eq!(out.repairs, 1);
        assert_eq!(out.op.provenance, vec!["sop-000007"]);
        let log = gw.log_entries();
        assert!(log[1].prompt.render().contains("missing field `team`"));
    }

    #[test]
    fn repair_budget_is_bounded() {
        let gw = Gateway::scripted(vec![ScriptRule::on("## INSTANTIATE", "no json here")]);
        let p = Prompts::default();
        let t = tools();
        let err = Instantiator::new(&gw, &p, &t)
            .instantiate(&coding_query(), &NeedAnalysis::new("n"), &[], &InstantiationMode::Normal, None)
            .unwrap_err();
        assert!(matches!(
            err,
            InstantiationError::ParseFailed {
                attempts: 3,
                error: ParseError::NoJsonFound
            }
        ));
        assert_eq!(gw.calls(), 3);
    }

    #[test]
    fn unknown_tool_is_a_validation_failure() {
        let reply = fixtures::CODING_TEST_LOOP.replace("\"bash\"", "\"sql\"");
        let gw = Gateway::scripted(vec![ScriptRule::on("## INSTANTIATE", reply)]);
        let p = Prompts::default();
        let t = tools();
        let err = Instantiator::new(&gw, &p, &t)
            .instantiate(&coding_query(), &NeedAnalysis::new("n"), &[], &InstantiationMode::NoSopRag, None)
            .unwrap_err();
        match err {
            InstantiationError::ValidationFailed { diagnostics, .. } => {
                assert!(matches!(&diagnostics[0], Diagnostic::UnknownTool { tool, .. } if tool == "sql"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_op_examples() {
        let q = Query::new("q", "x", TaskKind::Qa);
        let op = parse_op(fixtures::WEB_SEARCH_QA, &q).unwrap();
        assert_eq!(op.team().len(), 3);
        assert_eq!(op.structure().edges[0], crate::domain::Edge::new("User", "Planner"));
        assert_eq!(parse_op("hello", &q), Err(ParseError::NoJsonFound));
    }
}
