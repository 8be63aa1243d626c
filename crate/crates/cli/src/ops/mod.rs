//! Operations shared by the command line and the HTTP service.
//!
//! Each mutation takes the experiment's writer lock first. When the caller
//! passes the head digest it last read, the mutation is refused if anything
//! was appended since.

pub mod al;
pub mod irr;
pub mod pipeline;

use std::path::Path;
use std::sync::Arc;

use rubric_loop_core::active::ALError;
use rubric_loop_core::digest::Digest;
use rubric_loop_core::error::MetricError;
use rubric_loop_core::gateway::live::LiveBackend;
use rubric_loop_core::gateway::mock::{Cohort, MockBackend, ScriptEntry};
use rubric_loop_core::gateway::{
    Backend, BackendError, BackendKind, BatchError, Gateway, GatewayConfig, GatewayError,
};
use rubric_loop_core::irr::IrrError;
use rubric_loop_core::prompt::{PromptError, PromptSpec};
use rubric_loop_core::storage::{Dataset, Experiment, ExperimentConfig, RecordKind, Split, StorageError, Writer};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Process exit codes, stable for scripting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    Ok = 0,
    Validation = 1,
    Gateway = 2,
    GateFailed = 3,
    Lock = 4,
    Internal = 5,
}

impl Exit {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Error)]
pub enum OpsError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Irr(#[from] IrrError),
    #[error(transparent)]
    Active(#[from] ALError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("IRR gate failed (kappa must exceed {threshold}): {}", failing_list(.failing))]
    GateFailed { failing: Vec<(String, f64)>, threshold: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

fn failing_list(failing: &[(String, f64)]) -> String {
    failing
        .iter()
        .map(|(s, k)| format!("{s} kappa {k:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn storage_exit(e: &StorageError) -> Exit {
    match e {
        StorageError::Locked(_) | StorageError::StaleHead { .. } => Exit::Lock,
        StorageError::Io { .. } | StorageError::DigestMismatch { .. } | StorageError::Manifest { .. } => {
            Exit::Internal
        }
        _ => Exit::Validation,
    }
}

fn batch_exit(e: &BatchError) -> Exit {
    match e {
        BatchError::Auth(_) => Exit::Gateway,
        _ => Exit::Validation,
    }
}

/// `SomeVariant(..)` debug output to `some_variant`.
fn variant_code(debug: String) -> String {
    let mut out = String::new();
    for (i, c) in debug.chars().take_while(char::is_ascii_alphanumeric).enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

impl OpsError {
    pub fn exit(&self) -> Exit {
        match self {
            OpsError::Storage(e) => storage_exit(e),
            OpsError::Active(ALError::Batch(e)) | OpsError::Batch(e) => batch_exit(e),
            OpsError::Active(ALError::TooManyFailures { .. }) => Exit::Gateway,
            OpsError::Active(ALError::Log(_)) => Exit::Internal,
            OpsError::Gateway(_) | OpsError::Backend(_) => Exit::Gateway,
            OpsError::GateFailed { .. } => Exit::GateFailed,
            OpsError::Io { .. } => Exit::Internal,
            _ => Exit::Validation,
        }
    }

    /// Module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            OpsError::Storage(_) => "storage",
            OpsError::Prompt(_) => "prompt_builder",
            OpsError::Irr(_) | OpsError::GateFailed { .. } => "irr",
            OpsError::Active(_) => "active_learning",
            OpsError::Batch(_) | OpsError::Gateway(_) | OpsError::Backend(_) => "llm_gateway",
            OpsError::Metric(_) => "metrics",
            OpsError::Invalid(_) | OpsError::Io { .. } => "service_cli",
        }
    }

    /// Variant name of the underlying module error.
    pub fn code(&self) -> String {
        match self {
            OpsError::Storage(e) => variant_code(format!("{e:?}")),
            OpsError::Prompt(e) => variant_code(format!("{e:?}")),
            OpsError::Irr(e) => variant_code(format!("{e:?}")),
            OpsError::Active(e) => variant_code(format!("{e:?}")),
            OpsError::Batch(e) => variant_code(format!("{e:?}")),
            OpsError::Gateway(e) => variant_code(format!("{e:?}")),
            OpsError::Backend(e) => variant_code(format!("{e:?}")),
            OpsError::Metric(e) => variant_code(format!("{e:?}")),
            OpsError::GateFailed { .. } => "gate_failed".into(),
            OpsError::Invalid(_) => "invalid".into(),
            OpsError::Io { .. } => "io".into(),
        }
    }

    /// True for missing experiments and records.
    pub fn is_not_found(&self) -> bool {
        matches!(
            self,
            OpsError::Storage(StorageError::NoExperiment(_) | StorageError::NotFound { .. })
        )
    }
}

pub type Result<T, E = OpsError> = std::result::Result<T, E>;

pub fn invalid(msg: impl Into<String>) -> OpsError {
    OpsError::Invalid(msg.into())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| OpsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| OpsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Takes the writer lock and checks the caller's view is current.
pub fn lock(exp: &Experiment, expected_head: Option<&Digest>) -> Result<Writer> {
    let writer = exp.writer()?;
    if let Some(expected) = expected_head {
        let actual = exp.head()?;
        if &actual != expected {
            return Err(StorageError::StaleHead {
                expected: expected.to_string(),
                actual: actual.to_string(),
            }
            .into());
        }
    }
    Ok(writer)
}

pub fn latest_split(exp: &Experiment) -> Result<(Digest, Split)> {
    exp.load_latest(RecordKind::Split)?
        .ok_or_else(|| invalid("no split yet; run `split` first"))
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    /// Replies with each response's gold labels.
    EchoGold,
    /// The configured chat-completions endpoint.
    Live,
    /// Fixed replies keyed by prompt digest.
    Script { entries: Vec<ScriptEntry> },
    /// Gold labels with cohort errors that vanish once a cohort member is an
    /// exemplar.
    Repaired { cohorts: Vec<Cohort> },
}

impl BackendChoice {
    /// Default for an experiment: live if so configured, otherwise echo-gold.
    pub fn configured(config: &ExperimentConfig) -> Self {
        match config.gateway.backend {
            BackendKind::Live => BackendChoice::Live,
            BackendKind::Mock => BackendChoice::EchoGold,
        }
    }
}

pub fn gateway_for(
    config: &ExperimentConfig,
    choice: &BackendChoice,
    spec: &PromptSpec,
    dataset: &Dataset,
) -> Result<Gateway> {
    let mut gw_config: GatewayConfig = config.gateway.clone();
    let backend: Arc<dyn Backend> = match choice {
        BackendChoice::Live => {
            gw_config.backend = BackendKind::Live;
            Arc::new(LiveBackend::from_env(&gw_config)?)
        }
        BackendChoice::EchoGold => Arc::new(MockBackend::echo_gold(spec, &dataset.responses, &dataset.gold)?),
        BackendChoice::Script { entries } => Arc::new(MockBackend::new().with_script(entries.clone())),
        BackendChoice::Repaired { cohorts } => {
            let items: Vec<_> = dataset
                .responses
                .iter()
                .cloned()
                .zip(dataset.gold.iter().cloned())
                .collect();
            Arc::new(MockBackend::repaired_after_exemplar(&spec.rubric, &items, cohorts.clone()))
        }
    };
    if !matches!(choice, BackendChoice::Live) {
        gw_config.backend = BackendKind::Mock;
        gw_config.backoff_base_ms = 0;
    }
    Ok(Gateway::new(backend, gw_config)?)
}

/// Experiment head plus an operation's result, as served over HTTP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub head: Digest,
    pub data: T,
}

pub fn envelope<T>(exp: &Experiment, data: T) -> Result<Envelope<T>> {
    Ok(Envelope { head: exp.head()?, data })
}
