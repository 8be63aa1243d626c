//! Experiment setup, prompt building, scoring and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rubric_loop_core::active::{ALConfig, ALState};
use rubric_loop_core::digest::Digest;
use rubric_loop_core::gateway::{score_batch, GatewayConfig, ScoringRun};
use rubric_loop_core::irr::DEFAULT_IRR_FRACTION;
use rubric_loop_core::metrics::{agreement_band, evaluate_scores, AgreementBand, EvaluationReport};
use rubric_loop_core::model::{CotExemplar, ScoreVector};
use rubric_loop_core::prompt::{check_balance, render_prompt, BalanceReport, PromptMode, PromptSpec};
use rubric_loop_core::report::{render_csv, render_table, ReportRow, IMPLEMENTATIONS};
use rubric_loop_core::storage::{
    load_dataset, load_rubric, split_dataset, DatasetRef, Experiment, ExperimentConfig, RecordKind, Split,
    DEFAULT_TRAIN_RATIO, FORMAT_VERSION,
};
use serde::{Deserialize, Serialize};

use super::{gateway_for, invalid, latest_split, lock, BackendChoice, OpsError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitRequest {
    pub id: String,
    pub rubric: PathBuf,
    pub dataset: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_irr_fraction")]
    pub irr_fraction: f64,
    #[serde(default = "default_gateway")]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub active_learning: ALConfig,
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MODEL: &str = "gpt-4";

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_train_ratio() -> f64 {
    DEFAULT_TRAIN_RATIO
}

fn default_irr_fraction() -> f64 {
    DEFAULT_IRR_FRACTION
}

fn default_gateway() -> GatewayConfig {
    GatewayConfig::live(DEFAULT_MODEL)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Initialized {
    pub id: String,
    pub root: String,
    pub responses: usize,
    pub dataset_digest: Digest,
}

pub fn init(home: &Path, req: InitRequest) -> Result<Initialized> {
    let rubric = load_rubric(&req.rubric)?;
    let dataset = load_dataset(&req.dataset, &rubric)?;
    let path = std::fs::canonicalize(&req.dataset).map_err(|e| OpsError::Io {
        path: req.dataset.display().to_string(),
        reason: e.to_string(),
    })?;
    let bytes = std::fs::read(&path).map_err(|e| OpsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let dataset_digest = Digest::of_bytes(&bytes);
    let config = ExperimentConfig {
        format_version: FORMAT_VERSION,
        id: req.id,
        seed: req.seed,
        train_ratio: req.train_ratio,
        irr_fraction: req.irr_fraction,
        rubric,
        gateway: req.gateway,
        active_learning: req.active_learning,
    };
    config.gateway.validate()?;
    let exp = Experiment::create(
        home,
        &config,
        DatasetRef {
            path: path.display().to_string(),
            digest: dataset_digest.clone(),
        },
    )?;
    Ok(Initialized {
        id: exp.id().to_string(),
        root: exp.root().display().to_string(),
        responses: dataset.responses.len(),
        dataset_digest,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDone {
    pub digest: Digest,
    pub split: Split,
}

pub fn split(exp: &Experiment, ratio: Option<f64>, seed: Option<u64>, expected: Option<&Digest>) -> Result<SplitDone> {
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let split = split_dataset(
        dataset.ids().map(str::to_string),
        ratio.unwrap_or(config.train_ratio),
        seed.unwrap_or(config.seed),
    )?;
    let mut w = lock(exp, expected)?;
    let label = format!("seed={} ratio={}", split.seed, split.ratio);
    let digest = w.append(RecordKind::Split, &label, &split, None)?;
    Ok(SplitDone { digest, split })
}

/// The four prompt configurations compared in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Implementation {
    ZeroShot,
    FewShot,
    FewShotCot,
    CotAl,
}

impl Implementation {
    pub fn label(self) -> &'static str {
        match self {
            Implementation::ZeroShot => IMPLEMENTATIONS[0],
            Implementation::FewShot => IMPLEMENTATIONS[1],
            Implementation::FewShotCot => IMPLEMENTATIONS[2],
            Implementation::CotAl => IMPLEMENTATIONS[3],
        }
    }
}

/// Where a prompt's exemplars come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExemplarInput {
    #[default]
    None,
    /// The latest exemplars emitted by an IRR round.
    Irr,
    Given { exemplars: Vec<CotExemplar> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildRequest {
    pub implementation: Implementation,
    #[serde(default)]
    pub exemplars: ExemplarInput,
    #[serde(default)]
    pub allow_unbalanced: bool,
    #[serde(default)]
    pub persona: Option<String>,
    #[serde(default)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Built {
    pub digest: Digest,
    pub label: String,
    pub exemplar_ids: Vec<String>,
    pub balance: BalanceReport,
    pub prompt_digest: Digest,
    pub prompt_chars: usize,
}

pub fn build_prompt(exp: &Experiment, req: BuildRequest, expected: Option<&Digest>) -> Result<Built> {
    let config = exp.config()?;
    let label = req.implementation.label();
    let spec = match req.implementation {
        Implementation::CotAl => {
            let (_, state): (_, ALState) = exp
                .load_latest(RecordKind::AlState)?
                .ok_or_else(|| invalid("cot_al needs an active-learning state; run `al init` first"))?;
            state.spec
        }
        other => {
            let exemplars = match req.exemplars {
                ExemplarInput::None => Vec::new(),
                ExemplarInput::Given { exemplars } => exemplars,
                ExemplarInput::Irr => {
                    let (_, ex): (_, Vec<CotExemplar>) = exp
                        .load_latest(RecordKind::Exemplars)?
                        .ok_or_else(|| invalid("no IRR exemplars yet; run `irr advance` first"))?;
                    ex
                }
            };
            let mode = match other {
                Implementation::ZeroShot => PromptMode::ZeroShot,
                Implementation::FewShot => PromptMode::FewShot,
                _ => PromptMode::FewShotCot,
            };
            let mut spec = PromptSpec::new(config.rubric.clone(), mode, exemplars);
            spec.allow_unbalanced = req.allow_unbalanced;
            if let Some(p) = req.persona {
                spec.persona_preamble = p;
            }
            if let Some(f) = req.format {
                spec.format_instructions = f;
            }
            spec
        }
    };
    if let Ok((_, split)) = latest_split(exp) {
        if let Some(id) = spec.exemplar_ids().find(|id| split.test_ids.contains(*id)) {
            return Err(invalid(format!("exemplar {id} is in the test partition")));
        }
    }
    let text = render_prompt(&spec)?;
    let balance = check_balance(&spec.exemplars, &spec.rubric);
    let mut w = lock(exp, expected)?;
    let digest = w.append(RecordKind::PromptSpec, label, &spec, None)?;
    Ok(Built {
        digest,
        label: label.to_string(),
        exemplar_ids: spec.exemplar_ids().map(str::to_string).collect(),
        balance,
        prompt_digest: text.digest(),
        prompt_chars: text.as_str().chars().count(),
    })
}

/// Finds a prompt by implementation label (latest wins) or digest prefix.
pub fn resolve_prompt(exp: &Experiment, reference: &str) -> Result<(Digest, String, PromptSpec)> {
    let entry = match exp.latest_labeled(RecordKind::PromptSpec, reference)? {
        Some(e) => e,
        None => {
            let digest = exp.resolve(RecordKind::PromptSpec, reference)?;
            exp.entries(RecordKind::PromptSpec)?
                .into_iter()
                .rfind(|e| e.digest == digest)
                .expect("resolved digests are in the manifest")
        }
    };
    let spec = exp.load(RecordKind::PromptSpec, &entry.digest)?;
    Ok((entry.digest, entry.label, spec))
}

/// The rendered prompt, or the prompt filled with one response.
pub fn render(exp: &Experiment, reference: &str, response: Option<&str>) -> Result<String> {
    let (_, _, spec) = resolve_prompt(exp, reference)?;
    let text = render_prompt(&spec)?;
    match response {
        None => Ok(text.into_string()),
        Some(id) => {
            let dataset = exp.dataset()?;
            let (responses, _) = dataset.subset([id])?;
            Ok(text.fill(&responses[0]).into_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
    All,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
            Partition::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Partition { partition: Partition },
    Ids { ids: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// Implementation label or prompt digest prefix.
    pub prompt: String,
    pub target: Target,
    pub backend: BackendChoice,
    /// Continue the latest run of this prompt and target.
    #[serde(default)]
    pub resume: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scored {
    pub record: Digest,
    pub run_digest: Digest,
    pub label: String,
    pub scored: usize,
    pub flagged: usize,
    pub failures: BTreeMap<String, String>,
}

pub async fn score(exp: &Experiment, req: ScoreRequest, expected: Option<&Digest>) -> Result<Scored> {
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let (_, implementation, spec) = resolve_prompt(exp, &req.prompt)?;
    let (ids, target_name): (Vec<String>, String) = match &req.target {
        Target::Ids { ids } => (ids.clone(), "ids".into()),
        Target::Partition { partition } => {
            let ids = match partition {
                Partition::All => dataset.ids().map(str::to_string).collect(),
                p => {
                    let (_, split) = latest_split(exp)?;
                    let set = if *p == Partition::Train { split.train_ids } else { split.test_ids };
                    set.into_iter().collect()
                }
            };
            (ids, partition.name().into())
        }
    };
    let exemplar_ids: BTreeSet<&str> = spec.exemplar_ids().collect();
    if let Some(id) = ids.iter().find(|id| exemplar_ids.contains(id.as_str())) {
        return Err(invalid(format!("{id} is an exemplar of this prompt and cannot be scored by it")));
    }
    let (responses, _) = dataset.subset(ids.iter().map(String::as_str))?;
    let label = format!("{implementation}:{target_name}");
    let mut w = lock(exp, expected)?;
    let prior = if req.resume {
        match exp.latest_labeled(RecordKind::ScoringRun, &label)? {
            Some(e) => {
                let run: ScoringRun = exp.load(RecordKind::ScoringRun, &e.digest)?;
                (run.spec_digest == spec.digest()).then_some(run)
            }
            None => None,
        }
    } else {
        None
    };
    let gateway = gateway_for(&config, &req.backend, &spec, &dataset)?;
    let run = score_batch(&gateway, &spec, &responses, prior).await?;
    let record = w.append(RecordKind::ScoringRun, &label, &run, None)?;
    Ok(Scored {
        record,
        run_digest: run.digest(),
        label,
        scored: run.scores.len(),
        flagged: run.scores.values().filter(|s| s.is_flagged()).count(),
        failures: run
            .failures
            .iter()
            .map(|(id, f)| (id.clone(), f.kind.to_string()))
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluated {
    pub run: Digest,
    pub implementation: String,
    pub report: EvaluationReport,
    pub bands: BTreeMap<String, AgreementBand>,
    pub unscored: Vec<String>,
    pub table: String,
    pub csv: String,
}

/// Finds a scoring run by `latest`, exact label or digest prefix.
pub fn resolve_run(exp: &Experiment, reference: &str) -> Result<(Digest, String)> {
    let entry = if reference == "latest" {
        exp.latest(RecordKind::ScoringRun)?
            .ok_or_else(|| invalid("no scoring runs yet"))?
    } else if let Some(e) = exp.latest_labeled(RecordKind::ScoringRun, reference)? {
        e
    } else {
        let digest = exp.resolve(RecordKind::ScoringRun, reference)?;
        exp.entries(RecordKind::ScoringRun)?
            .into_iter()
            .rfind(|e| e.digest == digest)
            .expect("resolved digests are in the manifest")
    };
    Ok((entry.digest, entry.label))
}

fn evaluate_run(run: &ScoringRun, gold: &[ScoreVector], config: &ExperimentConfig) -> Result<EvaluationReport> {
    if run.scores.is_empty() {
        return Err(invalid("the run has no parsed scores to evaluate"));
    }
    let by_id: BTreeMap<&str, &ScoreVector> = gold.iter().map(|g| (g.response_id.as_str(), g)).collect();
    let mut matched = Vec::new();
    for id in run.scores.keys() {
        let g = by_id
            .get(id.as_str())
            .ok_or_else(|| invalid(format!("response {id} has no gold label")))?;
        matched.push((*g).clone());
    }
    Ok(evaluate_scores(&run.score_vectors(), &matched, &config.rubric)?)
}

pub fn evaluate(exp: &Experiment, reference: &str) -> Result<Evaluated> {
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let (digest, label) = resolve_run(exp, reference)?;
    let run: ScoringRun = exp.load(RecordKind::ScoringRun, &digest)?;
    let report = evaluate_run(&run, &dataset.gold, &config)?;
    let mut bands = BTreeMap::new();
    for (name, m) in &report.by_subscore {
        bands.insert(name.clone(), agreement_band(m.qwk)?);
    }
    bands.insert("total".to_string(), agreement_band(report.total.qwk)?);
    let implementation = label.split(':').next().unwrap_or(&label).to_string();
    let rows = vec![ReportRow {
        implementation: implementation.clone(),
        evaluation: report.clone(),
    }];
    Ok(Evaluated {
        run: digest,
        implementation,
        table: render_table(&rows, &config.rubric),
        csv: render_csv(&rows, &config.rubric),
        report,
        bands,
        unscored: run.failures.keys().cloned().collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Implementations with no scored test run.
    pub missing: Vec<String>,
    pub table: String,
    pub csv: String,
}

/// Compares the latest test-partition run of each implementation.
pub fn report(exp: &Experiment) -> Result<Report> {
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for implementation in IMPLEMENTATIONS {
        let label = format!("{implementation}:test");
        match exp.latest_labeled(RecordKind::ScoringRun, &label)? {
            Some(entry) => {
                let run: ScoringRun = exp.load(RecordKind::ScoringRun, &entry.digest)?;
                rows.push(ReportRow {
                    implementation: implementation.to_string(),
                    evaluation: evaluate_run(&run, &dataset.gold, &config)?,
                });
            }
            None => missing.push(implementation.to_string()),
        }
    }
    if rows.is_empty() {
        return Err(invalid("no implementation has been scored on the test partition"));
    }
    Ok(Report {
        table: render_table(&rows, &config.rubric),
        csv: render_csv(&rows, &config.rubric),
        rows,
        missing,
    })
}
