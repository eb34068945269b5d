//! Run configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use factcheck_core::dataset::SampleSize;
use factcheck_core::{FeedbackSource, Granularity};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the generation backend's base URL.
pub const BASE_URL_ENV: &str = "FACTCHECK_LM_BASE_URL";
/// Default environment variable holding a bearer token for LM backends.
pub const TOKEN_ENV: &str = "FACTCHECK_LM_TOKEN";

/// Columns dropped by default: currency-denominated amounts and
/// era-specific attributes of the original German credit data.
pub fn default_excluded_features() -> Vec<String> {
    ["credit_amount", "telephone", "foreign_worker", "personal_status_sex"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub label_column: String,
    #[serde(default)]
    pub id_column: Option<String>,
    /// Raw label text to binary label, e.g. `{"1" = 1, "2" = 0}`.
    pub label_map: BTreeMap<String, u8>,
    #[serde(default)]
    pub numeric_columns: Vec<String>,
    #[serde(default = "default_excluded_features")]
    pub excluded_features: Vec<String>,
    #[serde(default = "default_per_class")]
    pub cases_per_class: CasesPerClass,
    #[serde(default)]
    pub seed: u64,
}

fn default_delimiter() -> char {
    ','
}

fn default_per_class() -> CasesPerClass {
    CasesPerClass::All(AllKeyword::All)
}

/// `"all"` or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CasesPerClass {
    All(AllKeyword),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllKeyword {
    All,
}

impl From<CasesPerClass> for SampleSize {
    fn from(c: CasesPerClass) -> Self {
        match c {
            CasesPerClass::All(_) => SampleSize::All,
            CasesPerClass::Count(k) => SampleSize::PerClass(k),
        }
    }
}

/// One chat-completion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    /// Script file for an offline scripted backend instead of HTTP.
    #[serde(default)]
    pub mock: Option<PathBuf>,
}

fn default_base_url() -> String {
    "http://127.0.0.1:8000".into()
}
fn default_path() -> String {
    "/v1/chat/completions".into()
}
fn default_max_tokens() -> u32 {
    512
}
fn default_max_parallel() -> usize {
    4
}
fn default_retry_limit() -> u32 {
    3
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_token_env() -> String {
    TOKEN_ENV.into()
}

impl BackendConfig {
    pub fn new(model_name: impl Into<String>) -> Self {
        Self {
            base_url: default_base_url(),
            path: default_path(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            max_parallel: default_max_parallel(),
            retry_limit: default_retry_limit(),
            timeout_secs: default_timeout_secs(),
            backoff_ms: default_backoff_ms(),
            token_env: default_token_env(),
            mock: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn endpoint(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.path)
    }

    pub fn validate(&self, which: &str) -> Result<()> {
        if self.max_parallel == 0 {
            return Err(Error::Config(format!("{which}: max_parallel must be at least 1")));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("{which}: temperature must be non-negative")));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config(format!("{which}: max_tokens must be positive")));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config(format!("{which}: timeout_secs must be positive")));
        }
        Ok(())
    }
}

/// A verifier: either live fold deployments or a precomputed score file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub id: String,
    #[serde(default)]
    pub deployments: Vec<String>,
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "default_scorer_parallel")]
    pub max_parallel: usize,
}

fn default_scorer_parallel() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_sources")]
    pub sources: Vec<FeedbackSource>,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_rounds_granularity")]
    pub rounds_granularity: Granularity,
    #[serde(default = "default_rounds_source")]
    pub rounds_source: FeedbackSource,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub fold_seed: u64,
    #[serde(default = "default_bins")]
    pub density_bins: usize,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

fn default_sources() -> Vec<FeedbackSource> {
    vec![FeedbackSource::Oracle, FeedbackSource::SelfReflection]
}
fn default_granularity() -> Granularity {
    Granularity::SinglePoint
}
fn default_rounds() -> u32 {
    3
}
fn default_rounds_granularity() -> Granularity {
    Granularity::EntireContent
}
fn default_rounds_source() -> FeedbackSource {
    FeedbackSource::SelfReflection
}
fn default_folds() -> usize {
    3
}
fn default_bins() -> usize {
    10
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sources: default_sources(),
            granularity: default_granularity(),
            rounds: default_rounds(),
            rounds_granularity: default_rounds_granularity(),
            rounds_source: default_rounds_source(),
            folds: default_folds(),
            fold_seed: 0,
            density_bins: default_bins(),
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default)]
    pub bearer_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub generation: BackendConfig,
    /// Backend probed for self-reflection; defaults to the generation backend.
    #[serde(default)]
    pub self_reflection: Option<BackendConfig>,
    /// Separately fine-tuned model used only to produce feedback.
    #[serde(default)]
    pub finetuned: Option<BackendConfig>,
    #[serde(default)]
    pub scorers: Vec<ScorerConfig>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub api: ApiConfig,
}

impl RunConfig {
    /// Parse, resolve relative paths against the config file's directory,
    /// apply the base-URL environment override and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            cfg.generation.base_url = url;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        for b in [Some(&mut self.generation), self.self_reflection.as_mut(), self.finetuned.as_mut()]
            .into_iter()
            .flatten()
        {
            if let Some(m) = b.mock.as_mut() {
                fix(m);
            }
        }
        for s in &mut self.scorers {
            if let Some(f) = s.file.as_mut() {
                fix(f);
            }
        }
        if let Some(p) = self.experiment.prompts_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate("generation")?;
        if let Some(b) = &self.self_reflection {
            b.validate("self_reflection")?;
        }
        if let Some(b) = &self.finetuned {
            b.validate("finetuned")?;
        }
        if self.dataset.label_map.values().any(|&v| v > 1) {
            return Err(Error::Config("label_map values must be 0 or 1".into()));
        }
        if let CasesPerClass::Count(0) = self.dataset.cases_per_class {
            return Err(Error::Config("cases_per_class must be positive".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.scorers {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate scorer id {}", s.id)));
            }
            if s.deployments.is_empty() == s.file.is_none() {
                return Err(Error::Config(format!("scorer {}: give either deployments or file", s.id)));
            }
            if s.max_parallel == 0 {
                return Err(Error::Config(format!("scorer {}: max_parallel must be at least 1", s.id)));
            }
        }
        let e = &self.experiment;
        if e.folds == 0 {
            return Err(Error::Config("experiment.folds must be at least 1".into()));
        }
        if e.density_bins < 2 {
            return Err(Error::Config("experiment.density_bins must be at least 2".into()));
        }
        if e.sources.contains(&FeedbackSource::FinetunedSlm) && self.finetuned.is_none() {
            return Err(Error::Config("finetuned_slm feedback requested but [finetuned] backend is missing".into()));
        }
        if e.sources.contains(&FeedbackSource::Verifier) && self.scorers.is_empty() {
            return Err(Error::Config("verifier feedback requested but no [[scorers]] configured".into()));
        }
        if matches!(e.rounds_source, FeedbackSource::Oracle | FeedbackSource::Verifier) {
            return Err(Error::Config(
                "rounds_source must be self_reflection or finetuned_slm: later rounds have no annotations or scores".into(),
            ));
        }
        Ok(())
    }

    pub fn self_reflection_backend(&self) -> &BackendConfig {
        self.self_reflection.as_ref().unwrap_or(&self.generation)
    }
}
