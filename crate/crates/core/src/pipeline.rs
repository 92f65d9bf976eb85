//! Orchestration: decomposition plus the five stages per question, batch
//! drivers with bounded parallelism, and durable run output (trace JSONL
//! plus a manifest guarding resumes).
//!
//! Nothing here aborts a batch: per-question failures surface as Invalid
//! verdicts inside the trace, and reruns settle through the completion
//! cache instead of bespoke checkpoint state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::QuestionSet;
use crate::domain::{
    Decomposition, DomainError, MathQuestion, ParseSource, StageId, StageOutcome, StageVerdict,
    VerificationTrace,
};
use crate::gateway::{
    Backend, BackendConfig, CompletionCache, GatewayError, ModelClient, ModelEndpoint,
};
use crate::stages::{decompose, run_stage, StageError, StageOptions, TemplateSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    TraceFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error(
        "run directory {dir} belongs to a different configuration; \
         use a fresh directory or the original config"
    )]
    ManifestMismatch { dir: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// Whether a failing stage stops the remaining ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Stop at the first Fail; cheapest, used for curation.
    EarlyExit,
    /// Run every enabled stage regardless; needed for stepwise metrics.
    #[default]
    FullTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Endpoint used for every call without a more specific assignment.
    pub endpoint: ModelEndpoint,
    /// Per-stage overrides; stages not listed use `endpoint`.
    pub stage_endpoints: BTreeMap<StageId, ModelEndpoint>,
    /// Decomposition endpoint; defaults to `endpoint`.
    pub decompose_endpoint: Option<ModelEndpoint>,
    /// Judge model for the verdict-parse fallback. None disables it.
    pub judge: Option<ModelEndpoint>,
    /// Enabled stages; disabling one realizes the ablation variants.
    pub stage_mask: BTreeSet<StageId>,
    pub mode: ExecutionMode,
    pub stage_options: StageOptions,
    pub concurrency_limit: usize,
    pub cache_dir: Option<PathBuf>,
    /// Prompt directory; None uses the compiled-in templates.
    pub templates_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(endpoint: ModelEndpoint) -> Self {
        Self {
            endpoint,
            stage_endpoints: BTreeMap::new(),
            decompose_endpoint: None,
            judge: None,
            stage_mask: StageId::ALL.into_iter().collect(),
            mode: ExecutionMode::default(),
            stage_options: StageOptions::default(),
            concurrency_limit: 4,
            cache_dir: None,
            templates_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stage_mask.is_empty() {
            return Err(PipelineError::Config(
                "stage mask must enable at least one stage".to_string(),
            ));
        }
        if self.concurrency_limit == 0 {
            return Err(PipelineError::Config(
                "concurrency_limit must be positive".to_string(),
            ));
        }
        self.endpoint.validate()?;
        for endpoint in self.stage_endpoints.values() {
            endpoint.validate()?;
        }
        if let Some(e) = &self.decompose_endpoint {
            e.validate()?;
        }
        if let Some(e) = &self.judge {
            e.validate()?;
        }
        Ok(())
    }

    fn needs_decomposition(&self) -> bool {
        self.stage_mask.iter().any(|s| s.needs_decomposition())
    }
}

/// Manifest written next to the trace file. The digests are compared on
/// resume so a run directory is never silently continued under different
/// prompts or endpoints. Timestamps live only here, keeping the trace
/// file byte-stable across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub template_digests: BTreeMap<String, String>,
    pub model_ids: Vec<String>,
    /// Enabled stages, spelled out so ablation runs are legible without
    /// reversing the digest.
    pub stages: Vec<String>,
    pub started_at_unix: u64,
    #[serde(default)]
    pub finished_at_unix: Option<u64>,
}

/// A configured verifier: resolved clients, templates, and the run plan.
pub struct Pipeline {
    config: PipelineConfig,
    templates: TemplateSet,
    stage_clients: BTreeMap<StageId, Arc<ModelClient>>,
    decompose_client: Option<Arc<ModelClient>>,
    judge_client: Option<Arc<ModelClient>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        Self::build(config, None)
    }

    /// Resolve every endpoint against one supplied backend. Scripted tests
    /// serve several model ids from a single fixture table this way.
    pub fn with_shared_backend(
        config: PipelineConfig,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, PipelineError> {
        Self::build(config, Some(backend))
    }

    fn build(
        config: PipelineConfig,
        shared: Option<Arc<dyn Backend>>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        let cache = match &config.cache_dir {
            Some(dir) => Some(Arc::new(CompletionCache::open(dir)?)),
            None => None,
        };

        // endpoints repeat across stages; identical ones share a client so
        // the in-flight gate counts the whole pipeline, not one stage
        let mut pool: Vec<(ModelEndpoint, Arc<ModelClient>)> = Vec::new();
        let mut client_for = |endpoint: &ModelEndpoint| -> Result<Arc<ModelClient>, PipelineError> {
            if let Some((_, client)) = pool.iter().find(|(e, _)| e == endpoint) {
                return Ok(client.clone());
            }
            let client = match &shared {
                Some(backend) => {
                    ModelClient::with_backend(endpoint.clone(), backend.clone(), cache.clone())?
                }
                None => ModelClient::new(endpoint.clone(), cache.clone())?,
            };
            let client = Arc::new(client);
            pool.push((endpoint.clone(), client.clone()));
            Ok(client)
        };

        let mut stage_clients = BTreeMap::new();
        for stage in &config.stage_mask {
            let endpoint = config.stage_endpoints.get(stage).unwrap_or(&config.endpoint);
            stage_clients.insert(*stage, client_for(endpoint)?);
        }
        let decompose_client = if config.needs_decomposition() {
            let endpoint = config.decompose_endpoint.as_ref().unwrap_or(&config.endpoint);
            Some(client_for(endpoint)?)
        } else {
            None
        };
        let judge_client = match &config.judge {
            Some(endpoint) => Some(client_for(endpoint)?),
            None => None,
        };

        Ok(Self {
            config,
            templates,
            stage_clients,
            decompose_client,
            judge_client,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    /// Every model id the run can touch, sorted and deduplicated.
    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: BTreeSet<String> = self
            .stage_clients
            .values()
            .map(|c| c.endpoint().model_id.clone())
            .collect();
        if let Some(c) = &self.decompose_client {
            ids.insert(c.endpoint().model_id.clone());
        }
        if let Some(c) = &self.judge_client {
            ids.insert(c.endpoint().model_id.clone());
        }
        ids.into_iter().collect()
    }

    /// Digest over everything that can change a verdict: enabled stages,
    /// modes, and the semantic identity of each endpoint. Retry counts,
    /// timeouts, concurrency, and cache location are deliberately outside
    /// the digest; they change execution, not results.
    pub fn config_digest(&self) -> String {
        let c = &self.config;
        let stages: Vec<&str> = c.stage_mask.iter().map(|s| s.as_str()).collect();
        let mut per_stage = serde_json::Map::new();
        for stage in &c.stage_mask {
            let endpoint = c.stage_endpoints.get(stage).unwrap_or(&c.endpoint);
            per_stage.insert(stage.as_str().to_string(), endpoint_fingerprint(endpoint));
        }
        let value = json!({
            "stages": stages,
            "mode": c.mode,
            "stage_options": c.stage_options,
            "stage_endpoints": per_stage,
            "decompose": if c.needs_decomposition() {
                endpoint_fingerprint(c.decompose_endpoint.as_ref().unwrap_or(&c.endpoint))
            } else {
                serde_json::Value::Null
            },
            "judge": c.judge.as_ref().map(endpoint_fingerprint),
        });
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Run the enabled stages in order for one question. Decomposition
    /// happens once, immediately before the first stage that needs it, and
    /// is reused; if it fails, those stages record Invalid verdicts. Never
    /// returns an error: everything lands inside the trace.
    pub fn verify_question(&self, question: &MathQuestion) -> VerificationTrace {
        let mut executed: Vec<StageVerdict> = Vec::new();
        let mut skipped: BTreeSet<StageId> = StageId::ALL
            .into_iter()
            .filter(|s| !self.config.stage_mask.contains(s))
            .collect();
        let mut decomposition: Option<Decomposition> = None;
        let mut decompose_failure: Option<String> = None;
        let mut failed = false;

        for stage in StageId::ALL {
            if !self.config.stage_mask.contains(&stage) {
                continue;
            }
            if failed && self.config.mode == ExecutionMode::EarlyExit {
                skipped.insert(stage);
                continue;
            }
            if stage.needs_decomposition() && decomposition.is_none() && decompose_failure.is_none()
            {
                let client = self
                    .decompose_client
                    .as_ref()
                    .expect("mask with S3-S5 resolves a decompose client");
                match decompose(question, client, &self.templates) {
                    Ok(d) => decomposition = Some(d),
                    Err(e) => {
                        log::warn!("[{}] decomposition failed: {e}", question.id);
                        decompose_failure = Some(e.to_string());
                    }
                }
            }
            let verdict = if stage.needs_decomposition() && decomposition.is_none() {
                let note = decompose_failure
                    .as_deref()
                    .unwrap_or("decomposition unavailable");
                StageVerdict {
                    stage,
                    outcome: StageOutcome::Invalid,
                    rationale: format!("decomposition unavailable: {note}"),
                    raw_output: String::new(),
                    parse_source: ParseSource::RuleBased,
                    sub_flags: None,
                }
            } else {
                run_stage(
                    stage,
                    question,
                    decomposition.as_ref(),
                    self.stage_clients
                        .get(&stage)
                        .expect("one client per masked stage"),
                    self.judge_client.as_deref(),
                    &self.templates,
                    &self.config.stage_options,
                )
            };
            if verdict.outcome == StageOutcome::Fail {
                failed = true;
            }
            executed.push(verdict);
        }

        VerificationTrace::from_parts(
            &question.id,
            &self.config.endpoint.model_id,
            executed,
            skipped,
            decomposition,
        )
        .expect("each stage runs at most once")
    }

    /// Verify every record, returning traces in input order regardless of
    /// completion order.
    pub fn verify_dataset(
        &self,
        set: &QuestionSet,
    ) -> Result<Vec<VerificationTrace>, PipelineError> {
        self.verify_records(set.records(), None)
    }

    fn verify_records(
        &self,
        records: &[MathQuestion],
        writer: Option<&OrderedTraceWriter>,
    ) -> Result<Vec<VerificationTrace>, PipelineError> {
        if records.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let total = records.len();
        let workers = self.config.concurrency_limit.min(total);
        let next = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<VerificationTrace>>> =
            (0..total).map(|_| Mutex::new(None)).collect();
        let write_failure: Mutex<Option<PipelineError>> = Mutex::new(None);

        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if write_failure.lock().expect("failure flag").is_some() {
                        break;
                    }
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    if index >= total {
                        break;
                    }
                    let question = &records[index];
                    let trace = self.verify_question(question);
                    let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                    log::debug!(
                        "[{}/{}] {} -> {:?}",
                        finished,
                        total,
                        question.id,
                        trace.verdict
                    );
                    if let Some(writer) = writer {
                        let line =
                            serde_json::to_string(&trace).expect("traces always serialize");
                        if let Err(e) = writer.push(index, line) {
                            *write_failure.lock().expect("failure flag") =
                                Some(io_err("writing trace file")(e));
                            break;
                        }
                    }
                    *slots[index].lock().expect("result slot") = Some(trace);
                });
            }
        });

        if let Some(e) = write_failure.lock().expect("failure flag").take() {
            return Err(e);
        }
        Ok(slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("result slot")
                    .expect("every index was processed")
            })
            .collect())
    }

    /// Batch run with durable output: `traces.jsonl` (one trace per line,
    /// input order, flushed as each prefix completes) and `manifest.json`.
    /// Rerunning into the same directory requires the same config and
    /// templates; completed work is then recovered from the completion
    /// cache rather than re-asked of the backend.
    pub fn run_to_dir(
        &self,
        set: &QuestionSet,
        dir: impl AsRef<Path>,
    ) -> Result<Vec<VerificationTrace>, PipelineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let manifest_path = dir.join("manifest.json");
        let config_digest = self.config_digest();
        let template_digests = self.templates.digests();

        if manifest_path.exists() {
            let raw = fs::read_to_string(&manifest_path)
                .map_err(io_err(format!("reading {}", manifest_path.display())))?;
            let prior: RunManifest =
                serde_json::from_str(&raw).map_err(|e| PipelineError::TraceFile {
                    path: manifest_path.display().to_string(),
                    line: 1,
                    message: e.to_string(),
                })?;
            if prior.config_digest != config_digest || prior.template_digests != template_digests {
                return Err(PipelineError::ManifestMismatch {
                    dir: dir.display().to_string(),
                });
            }
            log::info!(
                "resuming {} under the recorded config; completions replay from cache",
                dir.display()
            );
        }

        let mut manifest = RunManifest {
            config_digest,
            template_digests,
            model_ids: self.model_ids(),
            stages: self
                .config
                .stage_mask
                .iter()
                .map(|s| s.as_str().to_string())
                .collect(),
            started_at_unix: unix_now(),
            finished_at_unix: None,
        };
        write_manifest(&manifest_path, &manifest)?;

        let trace_path = dir.join("traces.jsonl");
        let file = File::create(&trace_path)
            .map_err(io_err(format!("creating {}", trace_path.display())))?;
        let writer = OrderedTraceWriter::new(BufWriter::new(file));
        let traces = self.verify_records(set.records(), Some(&writer))?;
        writer.finish().map_err(io_err("flushing trace file"))?;

        manifest.finished_at_unix = Some(unix_now());
        write_manifest(&manifest_path, &manifest)?;
        Ok(traces)
    }
}

fn endpoint_fingerprint(e: &ModelEndpoint) -> serde_json::Value {
    json!({
        "model_id": e.model_id,
        "backend": match &e.backend {
            BackendConfig::Remote { base_url } => json!({ "remote": base_url }),
            BackendConfig::Scripted { fixture_path } => {
                json!({ "scripted": fixture_path.display().to_string() })
            }
        },
        "temperature": e.gen_params.temperature,
        "top_p": e.gen_params.top_p,
        "top_k": e.gen_params.top_k,
        "max_tokens": e.gen_params.max_tokens,
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), PipelineError> {
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, body).map_err(io_err(format!("writing {}", path.display())))
}

/// Serializes out-of-order completions into an input-ordered JSONL stream,
/// flushing whenever the written prefix grows. Single writer; workers call
/// `push` from any thread.
struct OrderedTraceWriter {
    state: Mutex<WriterState>,
}

struct WriterState {
    out: BufWriter<File>,
    pending: BTreeMap<usize, String>,
    next_index: usize,
}

impl OrderedTraceWriter {
    fn new(out: BufWriter<File>) -> Self {
        Self {
            state: Mutex::new(WriterState {
                out,
                pending: BTreeMap::new(),
                next_index: 0,
            }),
        }
    }

    fn push(&self, index: usize, line: String) -> std::io::Result<()> {
        let mut state = self.state.lock().expect("trace writer");
        state.pending.insert(index, line);
        let mut wrote = false;
        loop {
            let key = state.next_index;
            match state.pending.remove(&key) {
                Some(line) => {
                    state.out.write_all(line.as_bytes())?;
                    state.out.write_all(b"\n")?;
                    state.next_index += 1;
                    wrote = true;
                }
                None => break,
            }
        }
        if wrote {
            state.out.flush()?;
        }
        Ok(())
    }

    fn finish(self) -> std::io::Result<()> {
        let mut state = self.state.into_inner().expect("trace writer");
        debug_assert!(state.pending.is_empty(), "unwritten traces at finish");
        state.out.flush()
    }
}

/// Read a trace file back, with line numbers on parse failures.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<VerificationTrace>, PipelineError> {
    let path = path.as_ref();
    let file =
        File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: VerificationTrace =
            serde_json::from_str(&line).map_err(|e| PipelineError::TraceFile {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        traces.push(trace);
    }
    Ok(traces)
}

/// Read a run manifest back.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest, PipelineError> {
    let path = path.as_ref();
    let raw =
        fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| PipelineError::TraceFile {
        path: path.display().to_string(),
        line: 1,
        message: e.to_string(),
    })
}

/// Curation outcome: which questions survive. Unjudgeable ids are listed
/// explicitly so nothing disappears without a paper trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub retained: Vec<String>,
    pub unjudgeable: Vec<String>,
}

pub fn filter_valid(traces: &[VerificationTrace]) -> RetentionReport {
    let mut retained = Vec::new();
    let mut unjudgeable = Vec::new();
    for trace in traces {
        match trace.verdict {
            crate::domain::FinalVerdict::Valid => retained.push(trace.question_id.clone()),
            crate::domain::FinalVerdict::Unjudgeable => {
                unjudgeable.push(trace.question_id.clone())
            }
            crate::domain::FinalVerdict::Invalid => {}
        }
    }
    RetentionReport {
        retained,
        unjudgeable,
    }
}
