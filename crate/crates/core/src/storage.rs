//! Datasets, splits, and append-only experiment directories.
//!
//! Layout under the experiment root:
//!
//! ```text
//! <home>/experiment/<id>/
//!   config.toml   experiment settings, written once
//!   dataset.ref   dataset path and content digest
//!   MANIFEST      one `<kind> <digest> <label>` line per record, in write order
//!   LOCK          advisory single-writer lock
//!   splits/ irr/ prompts/ runs/ al/   records, one `<sha256>.json` each
//! ```
//!
//! Records are compact JSON named by the SHA-256 of their bytes, so a record
//! never changes once written and a load detects corruption. Writes go to a
//! temporary file, are fsynced, then renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{ALConfig, ALState, IterationLog};
use crate::digest::Digest;
use crate::gateway::{GatewayConfig, ScoringRun};
use crate::model::{fold_name, validate_score_vector, Rubric, ScoreVector, StudentResponse};
use crate::sampling::canonical_shuffle;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
pub const MIN_SPLIT_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StorageError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: duplicate response id {id} on line {line}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("need at least {MIN_SPLIT_SIZE} responses to split, got {0}")]
    TooSmall(usize),
    #[error("split ratio {ratio} leaves an empty partition for {n} responses")]
    BadRatio { ratio: f64, n: usize },
    #[error("experiment {0} already exists")]
    Exists(String),
    #[error("experiment {0} does not exist")]
    NoExperiment(String),
    #[error("invalid experiment id {0:?}")]
    BadId(String),
    #[error("another writer holds {0}")]
    Locked(String),
    #[error("{kind} record {digest} is corrupt: content hashes to {actual}")]
    DigestMismatch { kind: String, digest: String, actual: String },
    #[error("no {kind} record matches {digest}")]
    NotFound { kind: String, digest: String },
    #[error("{kind} prefix {prefix} is ambiguous")]
    Ambiguous { kind: String, prefix: String },
    #[error("experiment changed since it was read (head {actual}, expected {expected})")]
    StaleHead { expected: String, actual: String },
    #[error("MANIFEST line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("label must be a single line")]
    BadLabel,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StorageError + '_ {
    move |e| StorageError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question_id: String,
    pub text: String,
    pub gold: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub question_id: String,
    pub rubric: Rubric,
    pub responses: Vec<StudentResponse>,
    /// Aligned with `responses`.
    pub gold: Vec<ScoreVector>,
}

impl Dataset {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.responses.iter().map(|r| r.id.as_str())
    }

    /// Responses and gold for `ids`, in `ids` order.
    pub fn subset<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<(Vec<StudentResponse>, Vec<ScoreVector>), StorageError> {
        let index: BTreeMap<&str, usize> = self.ids().enumerate().map(|(i, id)| (id, i)).collect();
        let mut responses = Vec::new();
        let mut gold = Vec::new();
        for id in ids {
            let &i = index.get(id).ok_or_else(|| StorageError::NotFound {
                kind: "response".into(),
                digest: id.to_string(),
            })?;
            responses.push(self.responses[i].clone());
            gold.push(self.gold[i].clone());
        }
        Ok((responses, gold))
    }
}

pub fn load_rubric(path: &Path) -> Result<Rubric, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| StorageError::Parse {
        path: path.display().to_string(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        reason: e.message().to_string(),
    })
}

pub fn load_dataset(path: &Path, rubric: &Rubric) -> Result<Dataset, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, rubric, &path.display().to_string())
}

/// Parses JSON lines; blank lines are skipped. `origin` names the source in
/// diagnostics.
pub fn parse_dataset(text: &str, rubric: &Rubric, origin: &str) -> Result<Dataset, StorageError> {
    let fail = |line: usize, reason: String| StorageError::Parse {
        path: origin.to_string(),
        line,
        reason,
    };
    let mut seen = BTreeSet::new();
    let mut responses = Vec::new();
    let mut gold = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(raw).map_err(|e| fail(line, e.to_string()))?;
        if record.question_id != rubric.question_id {
            return Err(fail(
                line,
                format!(
                    "question {} does not match rubric question {}",
                    record.question_id, rubric.question_id
                ),
            ));
        }
        if !seen.insert(record.id.clone()) {
            return Err(StorageError::DuplicateId {
                path: origin.to_string(),
                line,
                id: record.id,
            });
        }
        let mut values = BTreeMap::new();
        for (name, value) in record.gold {
            let canonical = rubric
                .resolve_name(&name)
                .ok_or_else(|| fail(line, format!("gold references unknown subscore {name}")))?;
            if values.insert(canonical.to_string(), value).is_some() {
                return Err(fail(line, format!("subscore {} given twice", fold_name(&name))));
            }
        }
        let vector = ScoreVector::from_scores(record.id.clone(), values);
        validate_score_vector(&vector, rubric).map_err(|v| {
            fail(
                line,
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            )
        })?;
        let response = StudentResponse::new(record.id, record.question_id, &record.text)
            .map_err(|e| fail(line, e.to_string()))?;
        responses.push(response);
        gold.push(vector);
    }
    Ok(Dataset {
        question_id: rubric.question_id.clone(),
        rubric: rubric.clone(),
        responses,
        gold,
    })
}

pub fn dataset_to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (r, g) in dataset.responses.iter().zip(&dataset.gold) {
        let record = DatasetRecord {
            id: r.id.clone(),
            question_id: r.question_id.clone(),
            text: r.text.clone(),
            gold: g.by_subscore.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("dataset records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ratio: f64,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

/// Test size is `round((1 - ratio) * n)`; the train set takes the rest.
/// Ids are sorted, shuffled with the seeded shuffle in
/// [`crate::sampling`], and the first `n - test` become the train set.
pub fn split_dataset(
    ids: impl IntoIterator<Item = String>,
    ratio: f64,
    seed: u64,
) -> Result<Split, StorageError> {
    let shuffled = canonical_shuffle(ids, seed);
    let n = shuffled.len();
    if n < MIN_SPLIT_SIZE {
        return Err(StorageError::TooSmall(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(StorageError::BadRatio { ratio, n });
    }
    let test = ((1.0 - ratio) * n as f64).round() as usize;
    if test == 0 || test >= n {
        return Err(StorageError::BadRatio { ratio, n });
    }
    let (train, test) = shuffled.split_at(n - test);
    Ok(Split {
        seed,
        ratio,
        train_ids: train.iter().cloned().collect(),
        test_ids: test.iter().cloned().collect(),
    })
}

/// Settings fixed when an experiment is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub id: String,
    pub seed: u64,
    pub train_ratio: f64,
    pub irr_fraction: f64,
    pub rubric: Rubric,
    pub gateway: GatewayConfig,
    pub active_learning: ALConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Split,
    IrrRound,
    Consensus,
    Exemplars,
    PromptSpec,
    ScoringRun,
    AlState,
}

impl RecordKind {
    pub const ALL: [RecordKind; 7] = [
        RecordKind::Split,
        RecordKind::IrrRound,
        RecordKind::Consensus,
        RecordKind::Exemplars,
        RecordKind::PromptSpec,
        RecordKind::ScoringRun,
        RecordKind::AlState,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Split => "split",
            RecordKind::IrrRound => "irr_round",
            RecordKind::Consensus => "consensus",
            RecordKind::Exemplars => "exemplars",
            RecordKind::PromptSpec => "prompt_spec",
            RecordKind::ScoringRun => "scoring_run",
            RecordKind::AlState => "al_state",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            RecordKind::Split => "splits",
            RecordKind::IrrRound | RecordKind::Consensus => "irr",
            RecordKind::Exemplars | RecordKind::PromptSpec => "prompts",
            RecordKind::ScoringRun => "runs",
            RecordKind::AlState => "al",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for RecordKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: RecordKind,
    pub digest: Digest,
    pub label: String,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Read access to one experiment directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    id: String,
    root: PathBuf,
}

pub fn experiment_root(home: &Path, id: &str) -> PathBuf {
    home.join("experiment").join(id)
}

impl Experiment {
    pub fn open(home: &Path, id: &str) -> Result<Self, StorageError> {
        if !valid_id(id) {
            return Err(StorageError::BadId(id.to_string()));
        }
        let root = experiment_root(home, id);
        if !root.join("config.toml").is_file() {
            return Err(StorageError::NoExperiment(id.to_string()));
        }
        Ok(Self {
            id: id.to_string(),
            root,
        })
    }

    /// Creates the directory tree and writes the config and dataset
    /// reference. Fails if the experiment already exists.
    pub fn create(
        home: &Path,
        config: &ExperimentConfig,
        dataset: DatasetRef,
    ) -> Result<Self, StorageError> {
        if !valid_id(&config.id) {
            return Err(StorageError::BadId(config.id.clone()));
        }
        let root = experiment_root(home, &config.id);
        if root.exists() {
            return Err(StorageError::Exists(config.id.clone()));
        }
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let exp = Self {
            id: config.id.clone(),
            root,
        };
        let _lock = exp.lock()?;
        for kind in RecordKind::ALL {
            let dir = exp.root.join(kind.dir());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let toml = toml::to_string_pretty(config).map_err(|e| StorageError::Io {
            path: "config.toml".into(),
            reason: e.to_string(),
        })?;
        let dataset_ref = serde_json::to_string_pretty(&dataset).expect("dataset ref serializes");
        atomic_write(&exp.root.join("dataset.ref"), dataset_ref.as_bytes())?;
        atomic_write(&exp.root.join("MANIFEST"), b"")?;
        // config last: its presence marks the experiment as complete
        atomic_write(&exp.root.join("config.toml"), toml.as_bytes())?;
        Ok(exp)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> Result<ExperimentConfig, StorageError> {
        let path = self.root.join("config.toml");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        toml::from_str(&text).map_err(|e| StorageError::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: e.message().to_string(),
        })
    }

    pub fn dataset_ref(&self) -> Result<DatasetRef, StorageError> {
        let path = self.root.join("dataset.ref");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StorageError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    /// Loads the referenced dataset and checks it has not changed.
    pub fn dataset(&self) -> Result<Dataset, StorageError> {
        let reference = self.dataset_ref()?;
        let path = PathBuf::from(&reference.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = Digest::of_bytes(&bytes);
        if actual != reference.digest {
            return Err(StorageError::DigestMismatch {
                kind: "dataset".into(),
                digest: reference.digest.to_string(),
                actual: actual.to_string(),
            });
        }
        let text = String::from_utf8(bytes).map_err(|e| StorageError::Io {
            path: reference.path.clone(),
            reason: e.to_string(),
        })?;
        parse_dataset(&text, &self.config()?.rubric, &reference.path)
    }

    fn manifest_bytes(&self) -> Result<Vec<u8>, StorageError> {
        let path = self.root.join("MANIFEST");
        fs::read(&path).map_err(io_err(&path))
    }

    /// Digest of the MANIFEST; changes with every appended record.
    pub fn head(&self) -> Result<Digest, StorageError> {
        Ok(Digest::of_bytes(self.manifest_bytes()?))
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>, StorageError> {
        let bytes = self.manifest_bytes()?;
        let text = String::from_utf8_lossy(&bytes);
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| StorageError::Manifest {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.splitn(3, ' ');
            let kind = parts.next().and_then(RecordKind::parse).ok_or_else(|| bad("unknown kind"))?;
            let digest = parts
                .next()
                .and_then(|d| d.parse::<Digest>().ok())
                .ok_or_else(|| bad("bad digest"))?;
            out.push(ManifestEntry {
                kind,
                digest,
                label: parts.next().unwrap_or("").to_string(),
            });
        }
        Ok(out)
    }

    pub fn entries(&self, kind: RecordKind) -> Result<Vec<ManifestEntry>, StorageError> {
        Ok(self.manifest()?.into_iter().filter(|e| e.kind == kind).collect())
    }

    pub fn latest(&self, kind: RecordKind) -> Result<Option<ManifestEntry>, StorageError> {
        Ok(self.entries(kind)?.pop())
    }

    /// Latest record of `kind` with exactly this label.
    pub fn latest_labeled(&self, kind: RecordKind, label: &str) -> Result<Option<ManifestEntry>, StorageError> {
        Ok(self.entries(kind)?.into_iter().rev().find(|e| e.label == label))
    }

    /// Resolves a full digest or a unique prefix of at least 6 characters.
    pub fn resolve(&self, kind: RecordKind, prefix: &str) -> Result<Digest, StorageError> {
        let not_found = || StorageError::NotFound {
            kind: kind.to_string(),
            digest: prefix.to_string(),
        };
        if prefix.len() < 6 {
            return Err(not_found());
        }
        let matches: BTreeSet<Digest> = self
            .entries(kind)?
            .into_iter()
            .filter(|e| e.digest.as_str().starts_with(prefix))
            .map(|e| e.digest)
            .collect();
        match matches.len() {
            0 => Err(not_found()),
            1 => Ok(matches.into_iter().next().expect("one match")),
            _ => Err(StorageError::Ambiguous {
                kind: kind.to_string(),
                prefix: prefix.to_string(),
            }),
        }
    }

    fn record_path(&self, kind: RecordKind, digest: &Digest) -> PathBuf {
        self.root.join(kind.dir()).join(format!("{digest}.json"))
    }

    /// Loads a record and verifies its content against its name.
    pub fn load<T: DeserializeOwned>(&self, kind: RecordKind, digest: &Digest) -> Result<T, StorageError> {
        if !self.entries(kind)?.iter().any(|e| &e.digest == digest) {
            return Err(StorageError::NotFound {
                kind: kind.to_string(),
                digest: digest.to_string(),
            });
        }
        let path = self.record_path(kind, digest);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = Digest::of_bytes(&bytes);
        if &actual != digest {
            return Err(StorageError::DigestMismatch {
                kind: kind.to_string(),
                digest: digest.to_string(),
                actual: actual.to_string(),
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| StorageError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn load_latest<T: DeserializeOwned>(&self, kind: RecordKind) -> Result<Option<(Digest, T)>, StorageError> {
        match self.latest(kind)? {
            Some(e) => Ok(Some((e.digest.clone(), self.load(kind, &e.digest)?))),
            None => Ok(None),
        }
    }

    fn lock(&self) -> Result<File, StorageError> {
        let path = self.root.join("LOCK");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        match file.try_lock() {
            Ok(()) => Ok(file),
            Err(TryLockError::WouldBlock) => Err(StorageError::Locked(path.display().to_string())),
            Err(TryLockError::Error(e)) => Err(io_err(&path)(e)),
        }
    }

    /// Takes the single-writer lock; fails at once if it is held.
    pub fn writer(&self) -> Result<Writer, StorageError> {
        let lock = self.lock()?;
        Ok(Writer {
            exp: self.clone(),
            _lock: lock,
        })
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let dir = path.parent().expect("record paths have a parent");
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().expect("record paths have a name").to_string_lossy()
    ));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Holds the experiment lock until dropped.
#[derive(Debug)]
pub struct Writer {
    exp: Experiment,
    _lock: File,
}

impl Writer {
    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    /// Writes a record and appends it to the MANIFEST. With `expected_head`,
    /// fails if anything was appended since that head was read.
    pub fn append<T: Serialize>(
        &mut self,
        kind: RecordKind,
        label: &str,
        record: &T,
        expected_head: Option<&Digest>,
    ) -> Result<Digest, StorageError> {
        if label.contains(['\n', '\r']) {
            return Err(StorageError::BadLabel);
        }
        let manifest = self.exp.manifest_bytes()?;
        let head = Digest::of_bytes(&manifest);
        if let Some(expected) = expected_head {
            if expected != &head {
                return Err(StorageError::StaleHead {
                    expected: expected.to_string(),
                    actual: head.to_string(),
                });
            }
        }
        let bytes = serde_json::to_vec(record).expect("records serialize to JSON");
        let digest = Digest::of_bytes(&bytes);
        let path = self.exp.record_path(kind, &digest);
        if !path.exists() {
            atomic_write(&path, &bytes)?;
        }
        let mut next = manifest;
        next.extend_from_slice(format!("{kind} {digest} {label}\n").as_bytes());
        atomic_write(&self.exp.root.join("MANIFEST"), &next)?;
        tracing::debug!(%kind, digest = digest.short(), label, "record appended");
        Ok(digest)
    }
}

/// Persists active-learning snapshots and their scoring runs.
pub struct AlLog<'a> {
    pub writer: &'a mut Writer,
}

impl IterationLog for AlLog<'_> {
    fn record(&mut self, state: &ALState, run: Option<&ScoringRun>) -> Result<(), String> {
        let label = match state.events.last() {
            Some(event) => serde_json::to_value(event)
                .ok()
                .and_then(|v| v.get("event").and_then(|e| e.as_str()).map(str::to_string))
                .unwrap_or_default(),
            None => "init".to_string(),
        };
        let iteration = state.iterations.len().saturating_sub(1);
        if let Some(run) = run {
            self.writer
                .append(RecordKind::ScoringRun, &format!("al-iteration-{iteration}"), run, None)
                .map_err(|e| e.to_string())?;
        }
        self.writer
            .append(RecordKind::AlState, &format!("iteration-{iteration} {label}"), state, None)
            .map_err(|e| e.to_string())?;
        Ok(())
    }
}
