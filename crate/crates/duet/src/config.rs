//! Run configuration: backends by role, prompt templates and flags,
//! debate limits and oracle settings, loaded from one JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use duet_core::exp1::DEFAULT_SUMMARIZE_TOOL;
use duet_core::particles::{CalibrationSource, ParticleOptions};
use duet_core::{ChatBackend, DebateConfig, FinalObjective, PromptTemplateSet, RetryPolicy, SystemPromptFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::{HttpChatBackend, HttpChatSpec};
use crate::script::{load_script, ScriptError};

pub const RESPONDER: &str = "responder";
pub const REVIEWER: &str = "reviewer";
pub const ANALYST: &str = "analyst";
pub const CRITIC: &str = "critic";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("no `{0}` backend configured")]
    MissingBackend(String),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// A JSONL script, or a directory holding one `<round id>.jsonl` per
    /// round.
    Scripted {
        path: PathBuf,
    },
    HttpChat(HttpChatSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl BackendSpec {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self { kind: BackendKind::Scripted { path: path.into() }, retry: RetryPolicy::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.retry.validate().map_err(|e| e.to_string())?;
        match &self.kind {
            BackendKind::Scripted { path } if !path.exists() => {
                Err(format!("script path {} does not exist", path.display()))
            }
            BackendKind::Scripted { .. } => Ok(()),
            BackendKind::HttpChat(spec) => spec.validate(),
        }
    }

    /// Opens a fresh backend instance. Scripted directories are resolved
    /// per round, so every round replays from its own cursor.
    pub fn open(&self, round_id: &str) -> Result<Box<dyn ChatBackend + Send>, ConfigError> {
        match &self.kind {
            BackendKind::Scripted { path } => {
                let file = if path.is_dir() { path.join(format!("{round_id}.jsonl")) } else { path.clone() };
                Ok(Box::new(load_script(&file)?))
            }
            BackendKind::HttpChat(spec) => Ok(Box::new(HttpChatBackend::new(spec.clone(), self.retry))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSource>,
    pub options: ParticleOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backends: BTreeMap<String, BackendSpec>,
    pub templates: PromptTemplateSet,
    pub flags: SystemPromptFlags,
    pub objective: FinalObjective,
    pub debate: DebateConfig,
    pub summarize_tool: String,
    pub jobs: usize,
    pub oracle: OracleConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backends: BTreeMap::new(),
            templates: PromptTemplateSet::default(),
            flags: SystemPromptFlags::default(),
            objective: FinalObjective::default(),
            debate: DebateConfig::default(),
            summarize_tool: DEFAULT_SUMMARIZE_TOOL.into(),
            jobs: 1,
            oracle: OracleConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Json { path: path.display().to_string(), source })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.templates.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.debate.max_review_cycles == 0 {
            return Err(ConfigError::Invalid("debate.max_review_cycles must be at least 1".into()));
        }
        if self.summarize_tool.is_empty() {
            return Err(ConfigError::Invalid("summarize_tool is empty".into()));
        }
        if self.jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        if self.objective.text.trim().is_empty() {
            return Err(ConfigError::Invalid("objective.text is empty".into()));
        }
        for (role, spec) in &self.backends {
            spec.validate().map_err(|e| ConfigError::Invalid(format!("backend `{role}`: {e}")))?;
        }
        Ok(())
    }

    pub fn backend(&self, role: &str) -> Result<&BackendSpec, ConfigError> {
        self.backends.get(role).ok_or_else(|| ConfigError::MissingBackend(role.into()))
    }

    /// SHA-256 of the canonical JSON form. Struct fields serialise in
    /// declaration order and maps are ordered, so equal configs hash
    /// equally.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}
