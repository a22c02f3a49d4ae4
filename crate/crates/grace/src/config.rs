//! Run configuration: a TOML file describing the task, dataset, engine
//! hyperparameters, per-role providers, pricing, and output directory.
//!
//! Providers come in three kinds: `http` (live chat-completion endpoint,
//! credentials via an environment variable), `scripted` (line-delimited
//! JSON script of matcher/response entries), and `synthetic` (the
//! keyword-coverage world from [`crate::sim`]). Prices may be written as
//! decimal strings ("0.14"), fractions ("27/100"), or TOML floats;
//! they are parsed exactly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use num::bigint::BigInt;
use num::rational::BigRational;
use serde::Deserialize;
use thiserror::Error;

use crate::dataset::{BinarizeFracs, F1Averaging, TaskSpec, TestCapMode};
use crate::engine::EngineConfig;
use crate::gateway::{
    Backend, HttpConfig, HttpProvider, Matcher, RetryPolicy, ScriptEntry, ScriptedProvider,
    DEFAULT_MAX_IN_FLIGHT,
};
use crate::prompt::MetaPromptTemplates;
use crate::scoring::{parse_rational, Metric, Rational};
use crate::sim::SyntheticTask;
use crate::telemetry::{PricingTable, RolePricing};

/// Test splits larger than this are truncated unless configured
/// otherwise.
pub const DEFAULT_TEST_CAP: usize = 1000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub task: TaskSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    pub providers: ProvidersSection,
    #[serde(default)]
    pub pricing: Option<PricingSection>,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub metric: Metric,
    #[serde(default)]
    pub initial_prompt: Option<String>,
    #[serde(default)]
    pub initial_prompt_file: Option<PathBuf>,
    pub answer_format: String,
    #[serde(default)]
    pub task_suffix_template: Option<String>,
    #[serde(default)]
    pub f1_averaging: Option<F1Averaging>,
    /// Quantile fractions for continuous-score partitioning, e.g. "0.2".
    #[serde(default)]
    pub binarize_top: Option<String>,
    #[serde(default)]
    pub binarize_bottom: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub validation: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
    /// Cap applied to oversized predefined test splits (default 1000;
    /// 0 disables).
    #[serde(default)]
    pub test_cap: Option<usize>,
    #[serde(default)]
    pub test_cap_mode: Option<TestCapMode>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default)]
    pub max_iters: Option<u32>,
    #[serde(default)]
    pub compression_trigger: Option<u32>,
    #[serde(default)]
    pub n_success: Option<usize>,
    #[serde(default)]
    pub n_failure: Option<usize>,
    /// 0 disables early stopping.
    #[serde(default)]
    pub early_stop_window: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub eval_concurrency: Option<usize>,
    #[serde(default)]
    pub base_temperature: Option<f64>,
    #[serde(default)]
    pub optimizer_temperature: Option<f64>,
    #[serde(default)]
    pub extraction_retries: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    #[serde(default)]
    pub refine: Option<PathBuf>,
    #[serde(default)]
    pub compress: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersSection {
    pub base: ProviderSection,
    pub optimizer: ProviderSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    // http
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    // scripted
    #[serde(default)]
    pub script: Option<PathBuf>,
    // synthetic
    #[serde(default)]
    pub keywords: Option<Vec<String>>,
    #[serde(default)]
    pub noise_seed: Option<u64>,
    // retry / limits
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub retry_base_delay_ms: Option<u64>,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Scripted,
    Synthetic,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingSection {
    #[serde(default)]
    pub base: Option<RolePricingSection>,
    #[serde(default)]
    pub optimizer: Option<RolePricingSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolePricingSection {
    pub input_per_million: toml::Value,
    pub output_per_million: toml::Value,
    #[serde(default)]
    pub reasoning_excluded: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: Self = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Check invariants and that every referenced file exists, before any
    /// provider or model call is constructed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.task.initial_prompt, &self.task.initial_prompt_file) {
            (None, None) => {
                return Err(invalid("task needs initial_prompt or initial_prompt_file"))
            }
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "task sets both initial_prompt and initial_prompt_file",
                ))
            }
            _ => {}
        }
        if self.task.answer_format.trim().is_empty() {
            return Err(invalid("task.answer_format must be non-empty"));
        }
        let require = |path: &Path| -> Result<(), ConfigError> {
            if path.is_file() {
                Ok(())
            } else {
                Err(ConfigError::MissingFile(path.display().to_string()))
            }
        };
        require(&self.dataset.path)?;
        if let Some(p) = &self.task.initial_prompt_file {
            require(p)?;
        }
        if let Some(p) = &self.templates.refine {
            require(p)?;
        }
        if let Some(p) = &self.templates.compress {
            require(p)?;
        }
        for (name, provider) in [
            ("base", &self.providers.base),
            ("optimizer", &self.providers.optimizer),
        ] {
            provider.validate(name)?;
            if let Some(script) = &provider.script {
                require(script)?;
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec, ConfigError> {
        let initial_prompt = match (&self.task.initial_prompt, &self.task.initial_prompt_file) {
            (Some(text), None) => text.clone(),
            (None, Some(path)) => {
                std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?
            }
            _ => unreachable!("validated"),
        };
        let parse_frac =
            |text: &Option<String>, name: &str| -> Result<Option<Rational>, ConfigError> {
                text.as_deref()
                    .map(|t| {
                        parse_decimal_or_fraction(t)
                            .ok_or_else(|| invalid(format!("task.{name}: cannot parse {t:?}")))
                    })
                    .transpose()
            };
        let defaults = BinarizeFracs::default();
        let binarize = BinarizeFracs {
            top: parse_frac(&self.task.binarize_top, "binarize_top")?.unwrap_or(defaults.top),
            bottom: parse_frac(&self.task.binarize_bottom, "binarize_bottom")?
                .unwrap_or(defaults.bottom),
        };
        Ok(TaskSpec {
            name: self.task.name.clone(),
            metric: self.task.metric,
            task_suffix_template: self.task.task_suffix_template.clone(),
            answer_format: self.task.answer_format.clone(),
            initial_prompt: initial_prompt.trim_end().to_string(),
            f1_averaging: self.task.f1_averaging.unwrap_or_default(),
            binarize,
        })
    }

    /// Engine config from the file with CLI overrides applied on top.
    pub fn engine_config(&self, overrides: &EngineOverrides) -> EngineConfig {
        let mut config = EngineConfig::default();
        let section = &self.engine;
        if let Some(v) = section.max_iters {
            config.max_iters = v;
        }
        if let Some(v) = section.compression_trigger {
            config.compression_trigger = v;
        }
        if let Some(v) = section.n_success {
            config.n_success = v;
        }
        if let Some(v) = section.n_failure {
            config.n_failure = v;
        }
        if let Some(v) = section.early_stop_window {
            config.early_stop_window = (v > 0).then_some(v);
        }
        if let Some(v) = section.seed {
            config.seed = v;
        }
        if let Some(v) = section.eval_concurrency {
            config.eval_concurrency = v;
        }
        if let Some(v) = section.base_temperature {
            config.base_temperature = v;
        }
        if let Some(v) = section.optimizer_temperature {
            config.optimizer_temperature = v;
        }
        if let Some(v) = section.extraction_retries {
            config.extraction_retries = v;
        }
        overrides.apply(&mut config);
        config
    }

    pub fn templates(&self) -> Result<MetaPromptTemplates, crate::prompt::PromptError> {
        let read = |path: &PathBuf| std::fs::read_to_string(path);
        match (&self.templates.refine, &self.templates.compress) {
            (None, None) => Ok(MetaPromptTemplates::builtin()),
            (refine, compress) => {
                let refine_text = match refine {
                    Some(p) => {
                        read(p).map_err(|source| crate::prompt::PromptError::TemplateIo {
                            path: p.display().to_string(),
                            source,
                        })?
                    }
                    None => crate::prompt::BUILTIN_REFINE_TEMPLATE.to_string(),
                };
                let compress_text = match compress {
                    Some(p) => {
                        read(p).map_err(|source| crate::prompt::PromptError::TemplateIo {
                            path: p.display().to_string(),
                            source,
                        })?
                    }
                    None => crate::prompt::BUILTIN_COMPRESS_TEMPLATE.to_string(),
                };
                MetaPromptTemplates::new(&refine_text, &compress_text)
            }
        }
    }

    pub fn pricing_table(&self) -> Result<Option<PricingTable>, ConfigError> {
        let Some(section) = &self.pricing else {
            return Ok(None);
        };
        let convert = |role: &Option<RolePricingSection>,
                       name: &str|
         -> Result<Option<RolePricing>, ConfigError> {
            role.as_ref()
                .map(|p| {
                    Ok(RolePricing {
                        input_per_million: parse_price(&p.input_per_million)
                            .ok_or_else(|| invalid(format!("pricing.{name}.input_per_million")))?,
                        output_per_million: parse_price(&p.output_per_million)
                            .ok_or_else(|| invalid(format!("pricing.{name}.output_per_million")))?,
                        reasoning_excluded: p.reasoning_excluded,
                    })
                })
                .transpose()
        };
        Ok(Some(PricingTable {
            base: convert(&section.base, "base")?,
            optimizer: convert(&section.optimizer, "optimizer")?,
        }))
    }
}

impl ProviderSection {
    fn validate(&self, name: &str) -> Result<(), ConfigError> {
        match self.kind {
            ProviderKind::Http => {
                if self.base_url.is_none() || self.model.is_none() {
                    return Err(invalid(format!(
                        "providers.{name}: http providers need base_url and model"
                    )));
                }
            }
            ProviderKind::Scripted => {
                if self.script.is_none() {
                    return Err(invalid(format!(
                        "providers.{name}: scripted providers need a script file"
                    )));
                }
            }
            ProviderKind::Synthetic => {
                if self.keywords.as_ref().is_none_or(|k| k.is_empty()) {
                    return Err(invalid(format!(
                        "providers.{name}: synthetic providers need keywords"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        let mut policy = RetryPolicy::default();
        if let Some(v) = self.max_retries {
            policy.max_attempts = v.max(1);
        }
        if let Some(v) = self.retry_base_delay_ms {
            policy.base_delay_ms = v;
        }
        policy
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.unwrap_or(DEFAULT_MAX_IN_FLIGHT)
    }

    /// Construct the backend. Scripted backends keep a concrete handle so
    /// resume can advance them.
    pub fn build(&self, role_name: &str) -> Result<BuiltProvider, ConfigError> {
        match self.kind {
            ProviderKind::Http => {
                let api_key = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        invalid(format!(
                            "providers.{role_name}: environment variable {var} is not set"
                        ))
                    })?),
                    None => None,
                };
                let provider = HttpProvider::new(HttpConfig {
                    base_url: self.base_url.clone().expect("validated"),
                    model: self.model.clone().expect("validated"),
                    api_key,
                    timeout_secs: self.timeout_secs.unwrap_or(120),
                })
                .map_err(|e| invalid(format!("providers.{role_name}: {e}")))?;
                Ok(BuiltProvider::Other(Arc::new(provider)))
            }
            ProviderKind::Scripted => {
                let path = self.script.as_ref().expect("validated");
                let entries = load_script(path)?;
                Ok(BuiltProvider::Scripted(Arc::new(ScriptedProvider::new(
                    &format!("scripted-{role_name}"),
                    entries,
                ))))
            }
            ProviderKind::Synthetic => {
                let task = SyntheticTask::new(
                    self.keywords.clone().expect("validated"),
                    self.noise_seed.unwrap_or(0),
                );
                Ok(match role_name {
                    "base" => BuiltProvider::Other(task.base()),
                    _ => BuiltProvider::Other(task.optimizer()),
                })
            }
        }
    }
}

/// A constructed backend, with scripted ones kept concrete so resume can
/// advance their consumption point.
pub enum BuiltProvider {
    Scripted(Arc<ScriptedProvider>),
    Other(Arc<dyn Backend>),
}

impl BuiltProvider {
    pub fn backend(&self) -> Arc<dyn Backend> {
        match self {
            BuiltProvider::Scripted(p) => p.clone(),
            BuiltProvider::Other(p) => p.clone(),
        }
    }

    pub fn scripted(&self) -> Option<&Arc<ScriptedProvider>> {
        match self {
            BuiltProvider::Scripted(p) => Some(p),
            BuiltProvider::Other(_) => None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    #[serde(default)]
    matcher: Option<String>,
    response: String,
}

/// Script files are JSON lines `{"matcher": "needle", "response": "..."}`;
/// a missing matcher or `"*"` matches any request.
pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScriptLine = serde_json::from_str(line)
            .map_err(|e| invalid(format!("script {} line {}: {e}", path.display(), i + 1)))?;
        let matcher = match parsed.matcher.as_deref() {
            None | Some("*") => Matcher::Any,
            Some(needle) => Matcher::Substring(needle.to_string()),
        };
        entries.push(ScriptEntry {
            matcher,
            response: parsed.response,
        });
    }
    if entries.is_empty() {
        return Err(invalid(format!("script {} is empty", path.display())));
    }
    Ok(entries)
}

/// CLI flags that override the config file.
#[derive(Debug, Clone, Default)]
pub struct EngineOverrides {
    pub seed: Option<u64>,
    pub max_iters: Option<u32>,
    pub compression_trigger: Option<u32>,
    pub n_success: Option<usize>,
    pub n_failure: Option<usize>,
    /// 0 disables early stopping.
    pub early_stop: Option<u32>,
}

impl EngineOverrides {
    fn apply(&self, config: &mut EngineConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.max_iters {
            config.max_iters = v;
        }
        if let Some(v) = self.compression_trigger {
            config.compression_trigger = v;
        }
        if let Some(v) = self.n_success {
            config.n_success = v;
        }
        if let Some(v) = self.n_failure {
            config.n_failure = v;
        }
        if let Some(v) = self.early_stop {
            config.early_stop_window = (v > 0).then_some(v);
        }
    }
}

/// Parse a decimal string ("0.14"), fraction ("27/100"), or integer into
/// an exact rational.
pub fn parse_decimal_or_fraction(text: &str) -> Option<BigRational> {
    let text = text.trim();
    if text.contains('/') {
        return parse_rational(text);
    }
    let negative = text.starts_with('-');
    let unsigned = text.trim_start_matches(['-', '+']);
    let (whole, frac) = match unsigned.split_once('.') {
        Some((w, f)) => (w, f),
        None => (unsigned, ""),
    };
    if whole.is_empty() && frac.is_empty() {
        return None;
    }
    if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{whole}{frac}");
    let numer: BigInt = if digits.is_empty() {
        return None;
    } else {
        digits.parse().ok()?
    };
    let denom = BigInt::from(10u32).pow(frac.len() as u32);
    let value = BigRational::new(numer, denom);
    Some(if negative { -value } else { value })
}

fn parse_price(value: &toml::Value) -> Option<BigRational> {
    match value {
        toml::Value::String(s) => parse_decimal_or_fraction(s),
        toml::Value::Integer(i) => Some(BigRational::from(BigInt::from(*i))),
        // Floats go through their shortest decimal representation, which
        // recovers the intended price for humane values like 0.14.
        toml::Value::Float(f) => parse_decimal_or_fraction(&format!("{f}")),
        _ => None,
    }
}
