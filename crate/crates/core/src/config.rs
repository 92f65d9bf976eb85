//! Declarative run configuration.
//!
//! A run is described by one TOML file: the endpoints it may call, which of
//! them verifies / judges / decomposes, the stage mask and check modes, and
//! the voter roster for ensemble sweeps. Endpoints are declared once under
//! `[[endpoints]]` and referenced everywhere else by `model_id`, so a model
//! is configured in exactly one place.
//!
//! ```toml
//! [[endpoints]]
//! model_id = "qwen-72b"
//! base_url = "https://gw.example.com/v1"
//! temperature = 0.7
//!
//! [[endpoints]]
//! model_id = "replay"
//! fixture = "${FIXTURE_DIR}/replay.jsonl"
//!
//! verifier = "qwen-72b"
//! judge = "qwen-72b"
//! voters = ["qwen-72b", "replay"]
//! stages = ["s1", "s2", "s3", "s4", "s5"]
//! mode = "full_trace"
//! ```
//!
//! String values for `base_url`, `fixture`, `cache_dir`, and `templates_dir`
//! may embed `${VAR}` references, expanded from the environment at load time.
//! Secrets never appear in the file: each endpoint names the environment
//! variable (`auth_env`) holding its bearer token.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::domain::StageId;
use crate::gateway::ModelEndpoint;
use crate::pipeline::{ExecutionMode, PipelineConfig};
use crate::stages::{ConditionCheckMode, ContradictionCheckMode, StageOptions};

/// Fallback cache location consulted when the file sets no `cache_dir`.
pub const CACHE_DIR_ENV: &str = "MATHQ_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config {field} references undeclared endpoint {model_id:?}")]
    UnknownEndpoint { field: String, model_id: String },
    #[error("environment variable {name} referenced by the config is not set")]
    MissingEnv { name: String },
}

/// Wire form of the TOML document. Unknown keys are rejected so typos fail
/// loudly instead of silently reverting a setting to its default.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRoot {
    #[serde(default)]
    endpoints: Vec<FileEndpoint>,
    #[serde(default)]
    verifier: Option<String>,
    #[serde(default)]
    judge: Option<String>,
    #[serde(default)]
    decompose: Option<String>,
    /// Per-stage endpoint overrides, keyed "s1".."s5".
    #[serde(default)]
    stage_endpoints: BTreeMap<String, String>,
    #[serde(default)]
    stages: Option<Vec<String>>,
    #[serde(default)]
    mode: Option<ExecutionMode>,
    #[serde(default)]
    s3_mode: Option<ConditionCheckMode>,
    #[serde(default)]
    s4_mode: Option<ContradictionCheckMode>,
    #[serde(default)]
    concurrency: Option<usize>,
    #[serde(default)]
    cache_dir: Option<String>,
    #[serde(default)]
    templates_dir: Option<String>,
    #[serde(default)]
    voters: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEndpoint {
    model_id: String,
    /// Exactly one of `base_url` (live HTTP) or `fixture` (scripted replay).
    #[serde(default)]
    base_url: Option<String>,
    #[serde(default)]
    fixture: Option<String>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    top_p: Option<f64>,
    /// `0` disables top-k sampling (maps to `None`).
    #[serde(default)]
    top_k: Option<u32>,
    #[serde(default)]
    max_tokens: Option<u32>,
    #[serde(default)]
    auth_env: Option<String>,
    #[serde(default)]
    timeout_secs: Option<u64>,
    #[serde(default)]
    max_retries: Option<u32>,
    #[serde(default)]
    max_in_flight: Option<usize>,
}

/// A parsed, validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    endpoints: Vec<ModelEndpoint>,
    /// Default verifier; every stage without an override calls this model.
    pub verifier: String,
    pub judge: Option<String>,
    pub decompose: Option<String>,
    pub stage_endpoints: BTreeMap<StageId, String>,
    pub stage_mask: BTreeSet<StageId>,
    pub mode: ExecutionMode,
    pub stage_options: StageOptions,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    /// Ensemble roster for voting sweeps, in ballot order.
    pub voters: Vec<String>,
}

static ENV_REF: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"));

/// Expands `${VAR}` references from the process environment.
fn expand_env(value: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(value.len());
    let mut last = 0;
    for caps in ENV_REF.captures_iter(value) {
        let whole = caps.get(0).expect("match");
        let name = &caps[1];
        out.push_str(&value[last..whole.start()]);
        match std::env::var(name) {
            Ok(v) => out.push_str(&v),
            Err(_) => {
                return Err(ConfigError::MissingEnv {
                    name: name.to_string(),
                })
            }
        }
        last = whole.end();
    }
    out.push_str(&value[last..]);
    Ok(out)
}

fn build_endpoint(raw: &FileEndpoint) -> Result<ModelEndpoint, ConfigError> {
    let mut endpoint = match (&raw.base_url, &raw.fixture) {
        (Some(url), None) => ModelEndpoint::remote(&raw.model_id, expand_env(url)?),
        (None, Some(fixture)) => {
            ModelEndpoint::scripted(&raw.model_id, PathBuf::from(expand_env(fixture)?))
        }
        (Some(_), Some(_)) => {
            return Err(ConfigError::Invalid(format!(
                "endpoint {:?} sets both `base_url` and `fixture`; pick one",
                raw.model_id
            )))
        }
        (None, None) => {
            return Err(ConfigError::Invalid(format!(
                "endpoint {:?} needs `base_url` or `fixture`",
                raw.model_id
            )))
        }
    };
    if let Some(t) = raw.temperature {
        endpoint.gen_params.temperature = t;
    }
    if let Some(p) = raw.top_p {
        endpoint.gen_params.top_p = p;
    }
    if let Some(k) = raw.top_k {
        endpoint.gen_params.top_k = if k == 0 { None } else { Some(k) };
    }
    if let Some(m) = raw.max_tokens {
        endpoint.gen_params.max_tokens = m;
    }
    if let Some(env) = &raw.auth_env {
        endpoint.auth_env = env.clone();
    }
    if let Some(secs) = raw.timeout_secs {
        endpoint.timeout = Duration::from_secs(secs);
    }
    if let Some(r) = raw.max_retries {
        endpoint.max_retries = r;
    }
    if let Some(f) = raw.max_in_flight {
        endpoint.max_in_flight = Some(f);
    }
    endpoint
        .validate()
        .map_err(|e| ConfigError::Invalid(format!("endpoint {:?}: {e}", raw.model_id)))?;
    Ok(endpoint)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&raw, &path.display().to_string())
    }

    /// Parses a TOML document; `origin` labels error messages.
    pub fn parse(raw: &str, origin: &str) -> Result<Self, ConfigError> {
        let root: FileRoot = toml::from_str(raw).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;

        if root.endpoints.is_empty() {
            return Err(ConfigError::Invalid(
                "at least one [[endpoints]] entry is required".to_string(),
            ));
        }
        let mut endpoints = Vec::with_capacity(root.endpoints.len());
        let mut seen = BTreeSet::new();
        for raw_ep in &root.endpoints {
            if !seen.insert(raw_ep.model_id.clone()) {
                return Err(ConfigError::Invalid(format!(
                    "endpoint {:?} is declared twice",
                    raw_ep.model_id
                )));
            }
            endpoints.push(build_endpoint(raw_ep)?);
        }
        let known = |field: &str, id: &str| -> Result<String, ConfigError> {
            if seen.contains(id) {
                Ok(id.to_string())
            } else {
                Err(ConfigError::UnknownEndpoint {
                    field: field.to_string(),
                    model_id: id.to_string(),
                })
            }
        };

        let verifier = match &root.verifier {
            Some(id) => known("verifier", id)?,
            None if endpoints.len() == 1 => endpoints[0].model_id.clone(),
            None => {
                return Err(ConfigError::Invalid(
                    "`verifier` is required when more than one endpoint is declared".to_string(),
                ))
            }
        };
        let judge = root.judge.as_deref().map(|id| known("judge", id)).transpose()?;
        let decompose = root
            .decompose
            .as_deref()
            .map(|id| known("decompose", id))
            .transpose()?;

        let mut stage_endpoints = BTreeMap::new();
        for (key, id) in &root.stage_endpoints {
            let stage: StageId = key
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("stage_endpoints: {e}")))?;
            stage_endpoints.insert(stage, known(&format!("stage_endpoints.{key}"), id)?);
        }

        let stage_mask: BTreeSet<StageId> = match &root.stages {
            Some(names) => {
                let mut mask = BTreeSet::new();
                for name in names {
                    mask.insert(
                        name.parse::<StageId>()
                            .map_err(|e| ConfigError::Invalid(format!("stages: {e}")))?,
                    );
                }
                if mask.is_empty() {
                    return Err(ConfigError::Invalid(
                        "`stages` must name at least one stage".to_string(),
                    ));
                }
                mask
            }
            None => StageId::ALL.into_iter().collect(),
        };

        let concurrency = root.concurrency.unwrap_or(4);
        if concurrency == 0 {
            return Err(ConfigError::Invalid(
                "`concurrency` must be at least 1".to_string(),
            ));
        }

        // File setting wins; the environment variable is the fallback.
        let cache_dir = match &root.cache_dir {
            Some(dir) => Some(PathBuf::from(expand_env(dir)?)),
            None => std::env::var(CACHE_DIR_ENV)
                .ok()
                .filter(|v| !v.is_empty())
                .map(PathBuf::from),
        };
        let templates_dir = root
            .templates_dir
            .as_deref()
            .map(|d| expand_env(d).map(PathBuf::from))
            .transpose()?;

        let mut voters = Vec::with_capacity(root.voters.len());
        for id in &root.voters {
            voters.push(known("voters", id)?);
        }

        Ok(Self {
            endpoints,
            verifier,
            judge,
            decompose,
            stage_endpoints,
            stage_mask,
            mode: root.mode.unwrap_or_default(),
            stage_options: StageOptions {
                s3_mode: root.s3_mode.unwrap_or_default(),
                s4_mode: root.s4_mode.unwrap_or_default(),
            },
            concurrency,
            cache_dir,
            templates_dir,
            voters,
        })
    }

    pub fn endpoints(&self) -> &[ModelEndpoint] {
        &self.endpoints
    }

    pub fn endpoint(&self, model_id: &str) -> Option<&ModelEndpoint> {
        self.endpoints.iter().find(|e| e.model_id == model_id)
    }

    /// Pipeline configuration with the default verifier.
    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        self.pipeline_config_for(&self.verifier)
    }

    /// Pipeline configuration verifying with `model_id` instead of the
    /// default. Judge, decompose, and per-stage assignments still apply.
    pub fn pipeline_config_for(&self, model_id: &str) -> Result<PipelineConfig, ConfigError> {
        let resolve = |field: &str, id: &str| -> Result<ModelEndpoint, ConfigError> {
            self.endpoint(id)
                .cloned()
                .ok_or_else(|| ConfigError::UnknownEndpoint {
                    field: field.to_string(),
                    model_id: id.to_string(),
                })
        };
        let mut config = PipelineConfig::new(resolve("verifier", model_id)?);
        for (stage, id) in &self.stage_endpoints {
            config
                .stage_endpoints
                .insert(*stage, resolve(&format!("stage_endpoints.{}", stage.as_str()), id)?);
        }
        config.decompose_endpoint = self
            .decompose
            .as_deref()
            .map(|id| resolve("decompose", id))
            .transpose()?;
        config.judge = self
            .judge
            .as_deref()
            .map(|id| resolve("judge", id))
            .transpose()?;
        config.stage_mask = self.stage_mask.clone();
        config.mode = self.mode;
        config.stage_options = self.stage_options;
        config.concurrency_limit = self.concurrency;
        config.cache_dir = self.cache_dir.clone();
        config.templates_dir = self.templates_dir.clone();
        Ok(config)
    }
}
