use std::fmt::Write;
use std::path::Path;

use sopflow_core::domain::{PepRecord, SopCase};
use sopflow_core::repository::{PepStore, SopRepository};

pub fn inspect(root: &Path, show: Option<&str>) -> Result<(), String> {
    let unreadable = |e: sopflow_core::repository::RepositoryError| format!("cannot read store {}: {e}", root.display());
    let repo = SopRepository::open_read_only(root).map_err(unreadable)?;
    let pep = PepStore::open_read_only(root).map_err(unreadable)?;
    match show {
        Some(id) => {
            if let Some(case) = repo.get(id) {
                print!("{}", render_case(case));
            } else if let Some(record) = pep.get(id) {
                print!("{}", render_record(record));
            } else {
                return Err(format!("no entry `{id}` in {}", root.display()));
            }
        }
        None => {
            for case in repo.cases() {
                let tools = case.sop.tools();
                let tools = if tools.is_empty() { "-".to_string() } else { tools.join(", ") };
                println!(
                    "{}  team {}  tools {}  {}",
                    case.id,
                    case.sop.team_size(),
                    tools,
                    one_line(&case.query.text)
                );
            }
            for r in pep.records() {
                println!("{}  agents {}  {}", r.id, r.experiences.len(), one_line(&r.query.text));
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if s.chars().count() > 60 {
        format!("{}...", s.chars().take(57).collect::<String>())
    } else {
        s
    }
}

pub fn render_case(case: &SopCase) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} ({}, {})", case.id, case.query.task_kind, case.created_at);
    let _ = writeln!(out, "query: {}", case.query.text);
    if !case.need.text.is_empty() {
        let _ = writeln!(out, "need: {}", case.need.text);
    }
    let _ = writeln!(out, "team: {}", case.sop.team.join(", "));
    let _ = writeln!(out, "communication structure:");
    for line in case.sop.communication_structure.render_text().lines() {
        let _ = writeln!(out, "  {line}");
    }
    let _ = writeln!(out, "agents:");
    for a in &case.sop.agents {
        let _ = writeln!(out, "  {}", a.name);
        let _ = writeln!(out, "    responsibility: {}", a.responsibility);
        let _ = writeln!(out, "    instruction: {}", a.instruction);
        if !a.tools.is_empty() {
            let _ = writeln!(out, "    tools: {}", a.tools.join(", "));
        }
    }
    out
}

pub fn render_record(r: &PepRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} ({})", r.id, r.query.task_kind);
    let _ = writeln!(out, "query: {}", r.query.text);
    let _ = writeln!(out, "failure cause: {}", r.failure_cause);
    for e in &r.experiences {
        let _ = writeln!(out, "  {}", e.agent);
        let _ = writeln!(out, "    error: {}", e.error_attribution);
        let _ = writeln!(out, "    strategy: {}", e.improvement_strategy);
    }
    out
}
