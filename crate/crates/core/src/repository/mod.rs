//! Persistent SOP repository and experience pool with hybrid top-K retrieval.
//!
//! Both stores share one directory (see [`storage`]) and keep an in-memory
//! snapshot taken at open time. Writers serialize through a lock file;
//! retrieval is a linear scan over the snapshot.

mod storage;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_sop, Diagnostic, NeedAnalysis, PepRecord, Query, SopCase};
use crate::gateway::{cosine, Embedder, GatewayError};

pub use storage::{Manifest, Section};
use storage::{Kind, StoreDir};

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_K: usize = 2;
pub const DEFAULT_PEP_K: usize = 2;

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("SOP failed validation: {}", join_diagnostics(.0))]
    ValidationFailed(Vec<Diagnostic>),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("repository is empty")]
    EmptyRepository,
    #[error("experience record has no agent-wise experiences")]
    EmptyExperiences,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    Hybrid,
    QueryOnly,
    NeedOnly,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(RetrievalMode::Hybrid),
            "query" | "query_only" => Ok(RetrievalMode::QueryOnly),
            "need" | "need_only" => Ok(RetrievalMode::NeedOnly),
            other => Err(format!("unknown retrieval mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub lambda: f64,
    pub k: usize,
    pub mode: RetrievalMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            k: DEFAULT_K,
            mode: RetrievalMode::Hybrid,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RepositoryError> {
        check_lambda(self.lambda)?;
        if self.k == 0 {
            return Err(RepositoryError::InvalidK);
        }
        Ok(())
    }

    /// Weight actually applied to the query term under this mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            RetrievalMode::Hybrid => self.lambda,
            RetrievalMode::QueryOnly => 1.0,
            RetrievalMode::NeedOnly => 0.0,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<(), RepositoryError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(RepositoryError::LambdaOutOfRange(lambda))
    }
}

/// `lambda * sim_q + (1 - lambda) * sim_n`.
pub fn hybrid_score(sim_q: f64, sim_n: f64, lambda: f64) -> Result<f64, RepositoryError> {
    check_lambda(lambda)?;
    Ok(lambda * sim_q + (1.0 - lambda) * sim_n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub case: SopCase,
    pub score: f64,
    pub sim_q: f64,
    pub sim_n: f64,
}

/// Indices of `scores` sorted descending, earlier index first on ties.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

fn embedding_ok(v: &Option<Vec<f64>>, dimension: usize) -> bool {
    v.as_ref().is_some_and(|v| v.len() == dimension)
}

fn format_id(kind: Kind, n: u64) -> String {
    format!("{}-{n:06}", kind.prefix())
}

#[derive(Debug, Clone)]
pub struct SopRepository {
    dir: Option<StoreDir>,
    dimension: usize,
    cases: Vec<SopCase>,
    next_id: u64,
}

impl SopRepository {
    pub fn in_memory(dimension: usize) -> Self {
        Self {
            dir: None,
            dimension,
            cases: Vec::new(),
            next_id: 1,
        }
    }

    /// Opens (creating if needed) the store at `root`. Cached embeddings
    /// whose dimension differs from `embedder`'s are recomputed and rewritten.
    pub fn open(root: &Path, embedder: &dyn Embedder) -> Result<Self, RepositoryError> {
        let (dir, manifest) = StoreDir::create_or_open(root, embedder.dimension())?;
        let mut repo = Self {
            dir: Some(dir),
            dimension: embedder.dimension(),
            cases: Vec::new(),
            next_id: manifest.sop.next_id.max(1),
        };
        repo.load(&manifest, embedder)?;
        Ok(repo)
    }

    /// Opens an existing store without creating or rewriting anything.
    pub fn open_read_only(root: &Path) -> Result<Self, RepositoryError> {
        let (dir, manifest) = StoreDir::open_existing(root)?;
        let cases = manifest
            .sop
            .order
            .iter()
            .map(|id| dir.read_entry(Kind::Sop, id))
            .collect::<Result<Vec<SopCase>, _>>()?;
        Ok(Self {
            dir: None,
            dimension: manifest.dimension,
            cases,
            next_id: manifest.sop.next_id,
        })
    }

    fn load(&mut self, manifest: &Manifest, embedder: &dyn Embedder) -> Result<(), RepositoryError> {
        let dir = self.dir.clone().expect("load is only called on disk-backed stores");
        let mut stale = Vec::new();
        for id in &manifest.sop.order {
            let mut case: SopCase = dir.read_entry(Kind::Sop, id)?;
            if !embedding_ok(&case.query_embedding, self.dimension) || !embedding_ok(&case.need_embedding, self.dimension)
            {
                case.query_embedding = Some(embedder.embed(&case.query.text)?);
                case.need_embedding = Some(embedder.embed(&case.need.text)?);
                stale.push(case.id.clone());
            }
            self.cases.push(case);
        }
        if !stale.is_empty() || manifest.dimension != self.dimension {
            let _lock = dir.lock()?;
            for case in self.cases.iter().filter(|c| stale.contains(&c.id)) {
                dir.write_entry(Kind::Sop, &case.id, case)?;
            }
            let mut m = dir.read_manifest()?;
            m.dimension = self.dimension;
            dir.write_manifest(&m)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn cases(&self) -> &[SopCase] {
        &self.cases
    }

    pub fn get(&self, id: &str) -> Option<&SopCase> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Validates and stores `case`, assigning the next monotone id.
    pub fn add_case(
        &mut self,
        mut case: SopCase,
        registry_tools: &BTreeSet<String>,
        embedder: &dyn Embedder,
    ) -> Result<String, RepositoryError> {
        let diagnostics = validate_sop(&case.sop, registry_tools);
        if !diagnostics.is_empty() {
            return Err(RepositoryError::ValidationFailed(diagnostics));
        }
        if !embedding_ok(&case.query_embedding, self.dimension) {
            case.query_embedding = Some(embedder.embed(&case.query.text)?);
        }
        if !embedding_ok(&case.need_embedding, self.dimension) {
            case.need_embedding = Some(embedder.embed(&case.need.text)?);
        }
        match self.dir.clone() {
            None => {
                case.id = format_id(Kind::Sop, self.next_id);
                self.next_id += 1;
            }
            Some(dir) => {
                let _lock = dir.lock()?;
                let mut m = dir.read_manifest()?;
                let n = m.sop.next_id.max(self.next_id).max(1);
                case.id = format_id(Kind::Sop, n);
                dir.write_entry(Kind::Sop, &case.id, &case)?;
                m.sop.order.push(case.id.clone());
                m.sop.next_id = n + 1;
                dir.write_manifest(&m)?;
                self.next_id = n + 1;
            }
        }
        let id = case.id.clone();
        self.cases.push(case);
        Ok(id)
    }

    /// Top-K cases by hybrid score, descending, ties by insertion order.
    ///
    /// An empty need analysis forces query-only scoring with the need term at 0.
    pub fn retrieve(
        &self,
        query: &Query,
        need: &NeedAnalysis,
        cfg: &RetrievalConfig,
        embedder: &dyn Embedder,
    ) -> Result<Vec<ScoredCase>, RepositoryError> {
        cfg.validate()?;
        if self.cases.is_empty() {
            return Err(RepositoryError::EmptyRepository);
        }
        let need_missing = need.is_empty();
        let lambda = if need_missing { 1.0 } else { cfg.effective_lambda() };
        let q = embedder.embed(&query.text)?;
        let n = if need_missing { None } else { Some(embedder.embed(&need.text)?) };

        let mut parts = Vec::with_capacity(self.cases.len());
        for case in &self.cases {
            let sim_q = match &case.query_embedding {
                Some(e) => cosine(&q, e)?,
                None => 0.0,
            };
            let sim_n = match (&n, &case.need_embedding) {
                (Some(n), Some(e)) => cosine(n, e)?,
                _ => 0.0,
            };
            parts.push((sim_q, sim_n, hybrid_score(sim_q, sim_n, lambda)?));
        }
        let scores: Vec<f64> = parts.iter().map(|p| p.2).collect();
        Ok(rank(&scores)
            .into_iter()
            .take(cfg.k)
            .map(|i| ScoredCase {
                case: self.cases[i].clone(),
                score: parts[i].2,
                sim_q: parts[i].0,
                sim_n: parts[i].1,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record: PepRecord,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct PepStore {
    dir: Option<StoreDir>,
    dimension: usize,
    records: Vec<PepRecord>,
    next_id: u64,
}

impl PepStore {
    pub fn in_memory(dimension: usize) -> Self {
        Self {
            dir: None,
            dimension,
            records: Vec::new(),
            next_id: 1,
        }
    }

    pub fn open(root: &Path, embedder: &dyn Embedder) -> Result<Self, RepositoryError> {
        let (dir, manifest) = StoreDir::create_or_open(root, embedder.dimension())?;
        let dimension = embedder.dimension();
        let mut records = Vec::new();
        let mut stale = Vec::new();
        for id in &manifest.pep.order {
            let mut r: PepRecord = dir.read_entry(Kind::Pep, id)?;
            if !embedding_ok(&r.query_embedding, dimension) {
                r.query_embedding = Some(embedder.embed(&r.query.text)?);
                stale.push(r.id.clone());
            }
            records.push(r);
        }
        if !stale.is_empty() {
            let _lock = dir.lock()?;
            for r in records.iter().filter(|r| stale.contains(&r.id)) {
                dir.write_entry(Kind::Pep, &r.id, r)?;
            }
        }
        Ok(Self {
            dir: Some(dir),
            dimension,
            next_id: manifest.pep.next_id.max(1),
            records,
        })
    }

    pub fn open_read_only(root: &Path) -> Result<Self, RepositoryError> {
        let (dir, manifest) = StoreDir::open_existing(root)?;
        let records = manifest
            .pep
            .order
            .iter()
            .map(|id| dir.read_entry(Kind::Pep, id))
            .collect::<Result<Vec<PepRecord>, _>>()?;
        Ok(Self {
            dir: None,
            dimension: manifest.dimension,
            records,
            next_id: manifest.pep.next_id,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PepRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&PepRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn pep_add(&mut self, mut record: PepRecord, embedder: &dyn Embedder) -> Result<String, RepositoryError> {
        if record.experiences.is_empty() {
            return Err(RepositoryError::EmptyExperiences);
        }
        if !embedding_ok(&record.query_embedding, self.dimension) {
            record.query_embedding = Some(embedder.embed(&record.query.text)?);
        }
        match self.dir.clone() {
            None => {
                record.id = format_id(Kind::Pep, self.next_id);
                self.next_id += 1;
            }
            Some(dir) => {
                let _lock = dir.lock()?;
                let mut m = dir.read_manifest()?;
                let n = m.pep.next_id.max(self.next_id).max(1);
                record.id = format_id(Kind::Pep, n);
                dir.write_entry(Kind::Pep, &record.id, &record)?;
                m.pep.order.push(record.id.clone());
                m.pep.next_id = n + 1;
                dir.write_manifest(&m)?;
                self.next_id = n + 1;
            }
        }
        let id = record.id.clone();
        self.records.push(record);
        Ok(id)
    }

    /// Records ranked by query-embedding cosine, descending, ties by insertion.
    pub fn pep_lookup(
        &self,
        query: &Query,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<ScoredRecord>, RepositoryError> {
        if k == 0 {
            return Err(RepositoryError::InvalidK);
        }
        if self.records.is_empty() {
            return Ok(Vec::new());
        }
        let q = embedder.embed(&query.text)?;
        let sims = self
            .records
            .iter()
            .map(|r| match &r.query_embedding {
                Some(e) => cosine(&q, e),
                None => Ok(0.0),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(rank(&sims)
            .into_iter()
            .take(k)
            .map(|i| ScoredRecord {
                record: self.records[i].clone(),
                similarity: sims[i],
            })
            .collect())
    }
}
