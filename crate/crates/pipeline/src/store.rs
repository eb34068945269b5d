//! Run directory: append-only JSON-lines records plus a few JSON snapshots.
//!
//! Readers treat later lines as superseding earlier ones with the same key,
//! so a re-run step appends rather than rewrites.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use factcheck_core::gateway::{FoldPlan, VerifierScore};
use factcheck_core::{CaseRecord, FeedbackBundle, Generation};
use factcheck_core::feedback::AnnotationRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm_client::CompletionExchange;

pub const RUN_FILE: &str = "run.json";
pub const LOCK_FILE: &str = "run.lock";
pub const CASES_FILE: &str = "cases.jsonl";
pub const FOLDS_FILE: &str = "folds.json";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const BUNDLES_FILE: &str = "bundles.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const EXCHANGES_FILE: &str = "exchanges.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const REPORTS_DIR: &str = "reports";

/// Note prefix on a generation that stands in for a failed backend call.
pub const BACKEND_ERROR: &str = "backend_error";

/// Files every metric is recomputed from.
pub const RAW_FILES: [&str; 8] = [
    RUN_FILE,
    CASES_FILE,
    FOLDS_FILE,
    GENERATIONS_FILE,
    BUNDLES_FILE,
    ANNOTATIONS_FILE,
    SCORES_FILE,
    FAILURES_FILE,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub config: RunConfig,
}

/// Stable id of a configuration: a prefix of the SHA-256 of its JSON form.
pub fn run_id(config: &RunConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..6])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGeneration {
    pub arm: String,
    #[serde(flatten)]
    pub generation: Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmBundle {
    pub arm: String,
    #[serde(flatten)]
    pub bundle: FeedbackBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub arm: String,
    pub case_id: String,
    #[serde(flatten)]
    pub exchange: CompletionExchange,
}

/// A per-case degradation or a whole-arm failure (`case_id` absent).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub message: String,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct RunDir {
    root: PathBuf,
    _lock: Option<Lock>,
}

impl RunDir {
    /// Create (or reuse) a run directory for `config`, holding the writer lock.
    pub fn create(root: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let dir = Self::lock(root)?;
        let info = RunInfo { run_id: run_id(config), config: config.clone() };
        match dir.try_info()? {
            Some(existing) if existing.run_id != info.run_id => {
                return Err(Error::Store(format!(
                    "{} belongs to run {}, not {}",
                    root.display(),
                    existing.run_id,
                    info.run_id
                )))
            }
            Some(_) => {}
            None => dir.write_json(RUN_FILE, &info)?,
        }
        Ok(dir)
    }

    /// Open an existing run directory as its single writer.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = Self::lock(root)?;
        dir.info()?;
        Ok(dir)
    }

    /// Open without taking the writer lock; for reporting and replay.
    pub fn read_only(root: &Path) -> Result<Self> {
        let dir = Self { root: root.to_path_buf(), _lock: None };
        dir.info()?;
        Ok(dir)
    }

    fn lock(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Store(format!("{} is locked by another writer ({})", root.display(), path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { root: root.to_path_buf(), _lock: Some(Lock(path)) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn try_info(&self) -> Result<Option<RunInfo>> {
        let p = self.path(RUN_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::parse(&p, e.line(), e.to_string()))
    }

    pub fn info(&self) -> Result<RunInfo> {
        self.try_info()?
            .ok_or_else(|| Error::Store(format!("{} is not a run directory (no {RUN_FILE})", self.root.display())))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let tmp = self.path(&format!("{name}.tmp"));
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::parse(&path, e.line(), e.to_string()))
    }

    pub fn append<T: Serialize>(&self, name: &str, records: &[T]) -> Result<()> {
        append_jsonl(&self.path(name), records)
    }

    pub fn read<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        read_jsonl(&self.path(name))
    }

    pub fn write_cases(&self, cases: &[CaseRecord]) -> Result<()> {
        if self.path(CASES_FILE).exists() {
            return Err(Error::Store(format!("{} already holds prepared cases", self.root.display())));
        }
        self.append(CASES_FILE, cases)
    }

    pub fn cases(&self) -> Result<Vec<CaseRecord>> {
        let cases: Vec<CaseRecord> = self.read(CASES_FILE)?;
        if cases.is_empty() {
            return Err(Error::Store(format!("{} has no cases; run `prepare` first", self.root.display())));
        }
        Ok(cases)
    }

    pub fn folds(&self) -> Result<FoldPlan> {
        self.read_json(FOLDS_FILE)?
            .ok_or_else(|| Error::Store(format!("{} has no fold plan; run `prepare` first", self.root.display())))
    }

    /// Latest generation per (case, round) for `arm`, rounds ascending.
    pub fn generations(&self, arm: &str) -> Result<BTreeMap<String, Vec<Generation>>> {
        let mut latest: BTreeMap<(String, u32), Generation> = BTreeMap::new();
        for r in self.read::<ArmGeneration>(GENERATIONS_FILE)? {
            if r.arm == arm {
                latest.insert((r.generation.case_id.clone(), r.generation.round), r.generation);
            }
        }
        let mut out: BTreeMap<String, Vec<Generation>> = BTreeMap::new();
        for ((case, _), g) in latest {
            out.entry(case).or_default().push(g);
        }
        Ok(out)
    }

    pub fn arms(&self) -> Result<Vec<String>> {
        let mut arms: Vec<String> = self.read::<ArmGeneration>(GENERATIONS_FILE)?.into_iter().map(|r| r.arm).collect();
        arms.sort();
        arms.dedup();
        Ok(arms)
    }

    pub fn bundles(&self, arm: &str) -> Result<BTreeMap<(String, u32), FeedbackBundle>> {
        Ok(self
            .read::<ArmBundle>(BUNDLES_FILE)?
            .into_iter()
            .filter(|r| r.arm == arm)
            .map(|r| ((r.bundle.case_id.clone(), r.bundle.round), r.bundle))
            .collect())
    }

    pub fn annotations(&self) -> Result<Vec<AnnotationRecord>> {
        self.read(ANNOTATIONS_FILE)
    }

    /// Latest score per (scorer, case, round, point).
    pub fn scores(&self) -> Result<BTreeMap<String, Vec<VerifierScore>>> {
        let mut latest: BTreeMap<(String, String, u32, usize), VerifierScore> = BTreeMap::new();
        for s in self.read::<VerifierScore>(SCORES_FILE)? {
            latest.insert((s.scorer_id.clone(), s.case_id.clone(), s.round, s.point_index), s);
        }
        let mut out: BTreeMap<String, Vec<VerifierScore>> = BTreeMap::new();
        for ((scorer, ..), s) in latest {
            out.entry(scorer).or_default().push(s);
        }
        Ok(out)
    }

    pub fn failures(&self, arm: &str) -> Result<Vec<FailureRecord>> {
        Ok(self.read::<FailureRecord>(FAILURES_FILE)?.into_iter().filter(|f| f.arm == arm).collect())
    }

    pub fn exchanges(&self) -> Result<Vec<ExchangeRecord>> {
        self.read(EXCHANGES_FILE)
    }
}

pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("serializable");
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// All records of a JSON-lines file; a missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Hex SHA-256 of a file's bytes, or `None` when it does not exist.
pub fn file_sha256(path: &Path) -> Result<Option<String>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(hex::encode(Sha256::digest(&bytes)))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}
