//! On-disk layout shared by the SOP repository and the experience pool:
//!
//! ```text
//! <root>/manifest.json   insertion order, id counters, embedding dimension
//! <root>/sop/<id>.json   one SopCase per file
//! <root>/pep/<id>.json   one PepRecord per file
//! <root>/.lock           present while a writer holds the store
//! ```

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::RepositoryError;

const LOCK_WAIT: Duration = Duration::from_secs(10);
const STALE_LOCK: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub order: Vec<String>,
    pub next_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dimension: usize,
    #[serde(default)]
    pub sop: Section,
    #[serde(default)]
    pub pep: Section,
}

impl Manifest {
    pub fn new(dimension: usize) -> Self {
        Self {
            version: 1,
            dimension,
            sop: Section::default(),
            pep: Section::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Sop,
    Pep,
}

impl Kind {
    pub fn dir(self) -> &'static str {
        match self {
            Kind::Sop => "sop",
            Kind::Pep => "pep",
        }
    }

    pub fn prefix(self) -> &'static str {
        self.dir()
    }
}

#[derive(Debug, Clone)]
pub struct StoreDir {
    root: PathBuf,
}

/// Exclusive writer lock, released on drop.
pub struct WriteLock {
    path: PathBuf,
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn storage(path: &Path, e: impl std::fmt::Display) -> RepositoryError {
    RepositoryError::Storage(format!("{}: {e}", path.display()))
}

impl StoreDir {
    pub fn create_or_open(root: &Path, dimension: usize) -> Result<(Self, Manifest), RepositoryError> {
        for sub in [Kind::Sop.dir(), Kind::Pep.dir()] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| storage(&p, e))?;
        }
        let dir = Self {
            root: root.to_path_buf(),
        };
        let manifest_path = dir.manifest_path();
        if !manifest_path.exists() {
            let _lock = dir.lock()?;
            if !manifest_path.exists() {
                dir.write_manifest(&Manifest::new(dimension))?;
            }
        }
        let manifest = dir.read_manifest()?;
        Ok((dir, manifest))
    }

    /// Opens an existing store without creating anything.
    pub fn open_existing(root: &Path) -> Result<(Self, Manifest), RepositoryError> {
        let dir = Self {
            root: root.to_path_buf(),
        };
        if !dir.manifest_path().is_file() {
            return Err(storage(root, "not a store (manifest.json missing)"));
        }
        let manifest = dir.read_manifest()?;
        Ok((dir, manifest))
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn entry_path(&self, kind: Kind, id: &str) -> PathBuf {
        self.root.join(kind.dir()).join(format!("{id}.json"))
    }

    pub fn lock(&self) -> Result<WriteLock, RepositoryError> {
        let path = self.root.join(".lock");
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(WriteLock { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let stale = fs::metadata(&path)
                        .and_then(|m| m.modified())
                        .ok()
                        .and_then(|t| SystemTime::now().duration_since(t).ok())
                        .is_some_and(|age| age > STALE_LOCK);
                    if stale {
                        tracing::warn!(path = %path.display(), "removing stale store lock");
                        let _ = fs::remove_file(&path);
                        continue;
                    }
                    if start.elapsed() > LOCK_WAIT {
                        return Err(storage(&path, "store is locked by another writer"));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(storage(&path, e)),
            }
        }
    }

    pub fn read_manifest(&self) -> Result<Manifest, RepositoryError> {
        read_json(&self.manifest_path())
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<(), RepositoryError> {
        write_json_atomic(&self.manifest_path(), m)
    }

    pub fn read_entry<T: DeserializeOwned>(&self, kind: Kind, id: &str) -> Result<T, RepositoryError> {
        read_json(&self.entry_path(kind, id))
    }

    pub fn write_entry<T: Serialize>(&self, kind: Kind, id: &str, value: &T) -> Result<(), RepositoryError> {
        write_json_atomic(&self.entry_path(kind, id), value)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RepositoryError> {
    let text = fs::read_to_string(path).map_err(|e| storage(path, e))?;
    serde_json::from_str(&text).map_err(|e| storage(path, e))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), RepositoryError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| storage(path, e))?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| storage(path, e))
}
