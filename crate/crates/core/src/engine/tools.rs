//! Tool registry and the built-in tool handlers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{AgentSpec, ToolOutcome};

pub const BASH: &str = "bash";
pub const FILE_READ: &str = "file_read";
pub const SEARCH_STUB: &str = "search_stub";
/// Name under which hand-authored SOPs refer to web search.
pub const WEB_SEARCH_ALIAS: &str = "GOOGLE Search";

pub trait Tool: Send + Sync {
    /// Usage format shown to agents.
    fn usage(&self) -> &str;

    /// Runs the tool. `Err` carries the error text shown as the observation.
    fn call(&self, arguments: &str) -> Result<String, String>;
}

struct FnTool<F> {
    usage: String,
    f: F,
}

impl<F> Tool for FnTool<F>
where
    F: Fn(&str) -> Result<String, String> + Send + Sync,
{
    fn usage(&self) -> &str {
        &self.usage
    }

    fn call(&self, arguments: &str) -> Result<String, String> {
        (self.f)(arguments)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("tool `{0}` is not registered")]
    UnknownTool(String),
    #[error("agent `{agent}` is not granted tool `{tool}`")]
    ToolNotGranted { agent: String, tool: String },
    #[error("tool `{0}` is already registered")]
    Duplicate(String),
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToolSettings {
    pub bash_timeout: Option<Duration>,
    pub file_root: Option<PathBuf>,
    pub search_corpus: Option<PathBuf>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// bash, file_read and search_stub (also registered as `GOOGLE Search`).
    pub fn with_defaults(settings: &ToolSettings) -> Result<Self, String> {
        let mut r = Self::new();
        r.register(
            BASH,
            Arc::new(BashTool::new(settings.bash_timeout.unwrap_or(BashTool::DEFAULT_TIMEOUT))),
        )
        .map_err(|e| e.to_string())?;
        let root = settings
            .file_root
            .clone()
            .unwrap_or_else(|| std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")));
        r.register(FILE_READ, Arc::new(FileReadTool::new(root)))
            .map_err(|e| e.to_string())?;
        let search: Arc<dyn Tool> = Arc::new(match &settings.search_corpus {
            Some(p) => SearchStub::from_file(p)?,
            None => SearchStub::default(),
        });
        r.register(SEARCH_STUB, search.clone()).map_err(|e| e.to_string())?;
        r.register(WEB_SEARCH_ALIAS, search).map_err(|e| e.to_string())?;
        Ok(r)
    }

    pub fn register(&mut self, name: &str, tool: Arc<dyn Tool>) -> Result<(), ToolError> {
        if self.tools.contains_key(name) {
            return Err(ToolError::Duplicate(name.to_string()));
        }
        self.tools.insert(name.to_string(), tool);
        Ok(())
    }

    pub fn register_fn<F>(&mut self, name: &str, usage: &str, f: F) -> Result<(), ToolError>
    where
        F: Fn(&str) -> Result<String, String> + Send + Sync + 'static,
    {
        self.register(
            name,
            Arc::new(FnTool {
                usage: usage.to_string(),
                f,
            }),
        )
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn usage(&self, name: &str) -> Option<&str> {
        self.tools.get(name).map(|t| t.usage())
    }

    /// Invokes `tool` on behalf of `agent`. Handler failures are not errors:
    /// they come back as an observation with [`ToolOutcome::Error`].
    pub fn invoke(&self, agent: &AgentSpec, tool: &str, arguments: &str) -> Result<(String, ToolOutcome), ToolError> {
        let handler = self
            .tools
            .get(tool)
            .ok_or_else(|| ToolError::UnknownTool(tool.to_string()))?;
        if !agent.tools.iter().any(|t| t == tool) {
            return Err(ToolError::ToolNotGranted {
                agent: agent.name.clone(),
                tool: tool.to_string(),
            });
        }
        Ok(match handler.call(arguments) {
            Ok(obs) => (obs, ToolOutcome::Ok),
            Err(err) => (format!("Error: {err}"), ToolOutcome::Error),
        })
    }
}

/// Runs `sh -c <args>` in a fresh temporary directory with a cleared
/// environment and a wall-clock timeout. Network access is removed with
/// `unshare --net` where the host permits unprivileged namespaces.
pub struct BashTool {
    timeout: Duration,
}

impl BashTool {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

    pub fn new(timeout: Duration) -> Self {
        Self { timeout }
    }

    fn netns_available() -> bool {
        static AVAILABLE: OnceLock<bool> = OnceLock::new();
        *AVAILABLE.get_or_init(|| {
            Command::new("unshare")
                .args(["--net", "--map-root-user", "true"])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .is_ok_and(|s| s.success())
        })
    }

    pub fn run(&self, script: &str) -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| format!("sandbox setup failed: {e}"))?;
        self.run_in(dir.path(), script)
    }

    /// Like [`BashTool::run`] but inside an existing directory.
    pub fn run_in(&self, dir: &Path, script: &str) -> Result<String, String> {
        let mut cmd = if Self::netns_available() {
            let mut c = Command::new("unshare");
            c.args(["--net", "--map-root-user", "sh", "-c", script]);
            c
        } else {
            let mut c = Command::new("sh");
            c.args(["-c", script]);
            c
        };
        cmd.current_dir(dir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", dir)
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = cmd.spawn().map_err(|e| format!("failed to start shell: {e}"))?;
        let mut out = child.stdout.take().expect("stdout is piped");
        let mut err = child.stderr.take().expect("stderr is piped");
        let out_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = out.read_to_string(&mut s);
            s
        });
        let err_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = err.read_to_string(&mut s);
            s
        });
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(format!("wait failed: {e}")),
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        let mut text = stdout.trim_end().to_string();
        if !stderr.trim().is_empty() {
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str("[stderr]\n");
            text.push_str(stderr.trim_end());
        }
        match status {
            None => Err(format!("timed out after {}s", self.timeout.as_secs_f64())),
            Some(s) if s.success() => Ok(text),
            Some(s) => Err(format!(
                "exit status {}{}{}",
                s.code().map_or("signal".to_string(), |c| c.to_string()),
                if text.is_empty() { "" } else { ": " },
                text
            )),
        }
    }
}

impl Tool for BashTool {
    fn usage(&self) -> &str {
        "tool: bash | args: <shell command>  (runs in an empty scratch directory, no network, 10 s limit)"
    }

    fn call(&self, arguments: &str) -> Result<String, String> {
        self.run(arguments)
    }
}

/// Reads a UTF-8 file under a whitelisted root directory.
pub struct FileReadTool {
    root: PathBuf,
}

impl FileReadTool {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    fn resolve(&self, arg: &str) -> Result<PathBuf, String> {
        let root = self
            .root
            .canonicalize()
            .map_err(|e| format!("file root unavailable: {e}"))?;
        let requested = Path::new(arg.trim());
        let joined = if requested.is_absolute() {
            requested.to_path_buf()
        } else {
            root.join(requested)
        };
        let resolved = joined.canonicalize().map_err(|e| format!("{}: {e}", arg.trim()))?;
        if !resolved.starts_with(&root) {
            return Err(format!("{} is outside the readable root", arg.trim()));
        }
        Ok(resolved)
    }
}

impl Tool for FileReadTool {
    fn usage(&self) -> &str {
        "tool: file_read | args: <path relative to the data root>"
    }

    fn call(&self, arguments: &str) -> Result<String, String> {
        let path = self.resolve(arguments)?;
        std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CorpusEntry {
    pub query: String,
    pub snippet: String,
}

/// Offline stand-in for web search over a canned corpus: exact
/// (case-insensitive) query match first, otherwise the entry sharing the
/// most words with the request.
#[derive(Debug, Clone, Default)]
pub struct SearchStub {
    entries: Vec<CorpusEntry>,
}

impl SearchStub {
    pub fn new(entries: Vec<CorpusEntry>) -> Self {
        Self { entries }
    }

    /// Reads either a JSON list of `{query, snippet}` or an object mapping
    /// query to snippet.
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        if let Ok(list) = serde_json::from_str::<Vec<CorpusEntry>>(text) {
            return Ok(Self::new(list));
        }
        let map: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| format!("invalid search corpus: {e}"))?;
        Ok(Self::new(
            map.into_iter()
                .map(|(query, snippet)| CorpusEntry { query, snippet })
                .collect(),
        ))
    }

    fn words(s: &str) -> BTreeSet<String> {
        s.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn lookup(&self, request: &str) -> Option<&str> {
        let req = request.trim();
        if let Some(e) = self.entries.iter().find(|e| e.query.eq_ignore_ascii_case(req)) {
            return Some(&e.snippet);
        }
        let want = Self::words(req);
        let mut best: Option<(usize, &CorpusEntry)> = None;
        for e in &self.entries {
            let overlap = Self::words(&e.query).intersection(&want).count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, e));
            }
        }
        best.map(|(_, e)| e.snippet.as_str())
    }
}

impl Tool for SearchStub {
    fn usage(&self) -> &str {
        "tool: <search tool> | args: <comma-separated key terms>"
    }

    fn call(&self, arguments: &str) -> Result<String, String> {
        Ok(self
            .lookup(arguments)
            .map(str::to_string)
            .unwrap_or_else(|| "No results found.".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(tools: &[&str]) -> AgentSpec {
        AgentSpec {
            name: "Coder".into(),
            responsibility: "r".into(),
            instruction: "i".into(),
            tools: tools.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn bash_echo() {
        let r = ToolRegistry::with_defaults(&ToolSettings::default()).unwrap();
        assert_eq!(
            r.invoke(&spec(&["bash"]), "bash", "echo hi").unwrap(),
            ("hi".to_string(), ToolOutcome::Ok)
        );
    }

    #[test]
    fn bash_failure_and_timeout_are_observations() {
        let r = BashTool::new(Duration::from_millis(300));
        assert!(r.run("exit 3").unwrap_err().starts_with("exit status 3"));
        assert!(r.run("sleep 5").unwrap_err().starts_with("timed out"));
    }

    #[test]
    fn bash_runs_in_scratch_dir_with_clean_env() {
        let r = BashTool::new(Duration::from_secs(5));
        let out = r.run("ls -A | wc -l; echo ${SECRET_TOKEN:-unset}").unwrap();
        assert_eq!(out.split_whitespace().collect::<Vec<_>>(), ["0", "unset"]);
    }

    #[test]
    fn ungranted_and_unknown_tools() {
        let r = ToolRegistry::with_defaults(&ToolSettings::default()).unwrap();
        assert_eq!(
            r.invoke(&spec(&[]), "bash", "echo hi"),
            Err(ToolError::ToolNotGranted {
                agent: "Coder".into(),
                tool: "bash".into()
            })
        );
        assert_eq!(
            r.invoke(&spec(&["sql"]), "sql", "x"),
            Err(ToolError::UnknownTool("sql".into()))
        );
    }

    #[test]
    fn search_stub_corpus_lookup() {
        let stub = SearchStub::from_json(
            r#"{"capital of France": "Paris is the capital of France.", "tallest mountain": "Everest."}"#,
        )
        .unwrap();
        assert_eq!(stub.call("capital of France").unwrap(), "Paris is the capital of France.");
        assert_eq!(stub.call("France, capital").unwrap(), "Paris is the capital of France.");
        assert_eq!(stub.call("quantum chromodynamics").unwrap(), "No results found.");
    }

    #[test]
    fn file_read_stays_under_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        let tool = FileReadTool::new(dir.path().to_path_buf());
        assert_eq!(tool.call("notes.txt").unwrap(), "hello");
        assert!(tool.call("../../etc/passwd").is_err());
        assert!(tool.call("/etc/hostname").is_err());
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut r = ToolRegistry::new();
        r.register_fn("x", "u", |_| Ok(String::new())).unwrap();
        assert_eq!(
            r.register_fn("x", "u", |_| Ok(String::new())),
            Err(ToolError::Duplicate("x".into()))
        );
    }
}
