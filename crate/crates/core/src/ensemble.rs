//! (n,k) threshold voting over per-model final verdicts. A question is
//! accepted when at least k of the n voters call it valid; votes that
//! could not be judged count as rejections. Sweeps over stored votes are
//! pure arithmetic and never touch a model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MathQuestion, VerificationTrace};
use crate::metrics::{compute_scores, confusion, MetricsError, Prediction, VotingReportRow};
use crate::pipeline::Pipeline;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble config: {0}")]
    Config(String),
    #[error("question {question_id}: expected {expected} votes, got {got}")]
    VoteCount {
        question_id: String,
        expected: usize,
        got: usize,
    },
    #[error("voter {model_id} is not in the stored roster")]
    UnknownVoter { model_id: String },
    #[error("duplicate voter {model_id}")]
    DuplicateVoter { model_id: String },
    #[error("model {model_id} voted on a different question set: {detail}")]
    IdSetMismatch { model_id: String, detail: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    VoteFile {
        path: String,
        line: usize,
        message: String,
    },
}

/// One voter's verdict on one question, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVote {
    pub model_id: String,
    pub vote: Prediction,
}

/// All votes cast on one question, in roster order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteVector {
    pub question_id: String,
    pub votes: Vec<ModelVote>,
}

impl VoteVector {
    pub fn new(
        question_id: impl Into<String>,
        votes: Vec<ModelVote>,
    ) -> Result<Self, EnsembleError> {
        let mut seen = BTreeSet::new();
        for v in &votes {
            if !seen.insert(v.model_id.as_str()) {
                return Err(EnsembleError::DuplicateVoter {
                    model_id: v.model_id.clone(),
                });
            }
        }
        Ok(Self {
            question_id: question_id.into(),
            votes,
        })
    }

    fn vote_of(&self, model_id: &str) -> Result<Prediction, EnsembleError> {
        self.votes
            .iter()
            .find(|v| v.model_id == model_id)
            .map(|v| v.vote)
            .ok_or_else(|| EnsembleError::UnknownVoter {
                model_id: model_id.to_string(),
            })
    }
}

/// The (n, k) rule: n voters, accepted iff at least k vote positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n: usize,
    pub k: usize,
}

impl EnsembleConfig {
    pub fn new(n: usize, k: usize) -> Result<Self, EnsembleError> {
        let cfg = Self { n, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.k < 1 || self.k > self.n {
            return Err(EnsembleError::Config(format!(
                "threshold k must satisfy 1 <= k <= n, got (n={}, k={})",
                self.n, self.k
            )));
        }
        Ok(())
    }
}

/// Apply the threshold rule to one vote vector. Invalid votes count as
/// negative, so the result is always a crisp accept/reject.
pub fn vote(v: &VoteVector, cfg: &EnsembleConfig) -> Result<bool, EnsembleError> {
    cfg.validate()?;
    if v.votes.len() != cfg.n {
        return Err(EnsembleError::VoteCount {
            question_id: v.question_id.clone(),
            expected: cfg.n,
            got: v.votes.len(),
        });
    }
    let positives = v
        .votes
        .iter()
        .filter(|m| m.vote == Prediction::Positive)
        .count();
    Ok(positives >= cfg.k)
}

/// Full pipelines run once per voter, finals aggregated by the threshold
/// rule. Per-model breakage is already absorbed into Unjudgeable traces,
/// which become negative votes here.
pub struct EnsembleOutcome {
    pub accepted: bool,
    pub votes: VoteVector,
    pub traces: Vec<VerificationTrace>,
}

pub fn ensemble_verify(
    question: &MathQuestion,
    pipelines: &[Pipeline],
    cfg: &EnsembleConfig,
) -> Result<EnsembleOutcome, EnsembleError> {
    cfg.validate()?;
    if pipelines.len() != cfg.n {
        return Err(EnsembleError::Config(format!(
            "ensemble of n={} needs {} pipelines, got {}",
            cfg.n,
            cfg.n,
            pipelines.len()
        )));
    }
    let traces: Vec<VerificationTrace> = pipelines
        .iter()
        .map(|p| p.verify_question(question))
        .collect();
    let votes = VoteVector::new(
        &question.id,
        traces
            .iter()
            .map(|t| ModelVote {
                model_id: t.model_id.clone(),
                vote: Prediction::from_final(t.verdict),
            })
            .collect(),
    )?;
    let accepted = vote(&votes, cfg)?;
    Ok(EnsembleOutcome {
        accepted,
        votes,
        traces,
    })
}

/// Score a list of (config, voter subset) pairs against stored votes and
/// ground truth. Pure arithmetic over the store: no model is consulted.
/// Row order follows the input.
pub fn sweep_configs(
    per_question_votes: &BTreeMap<String, VoteVector>,
    labels: &BTreeMap<String, bool>,
    configs: &[(EnsembleConfig, Vec<String>)],
) -> Result<Vec<VotingReportRow>, EnsembleError> {
    let mut rows = Vec::with_capacity(configs.len());
    for (cfg, voters) in configs {
        cfg.validate()?;
        if voters.len() != cfg.n {
            return Err(EnsembleError::Config(format!(
                "config (n={}, k={}) lists {} voters",
                cfg.n,
                cfg.k,
                voters.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for v in voters {
            if !seen.insert(v.as_str()) {
                return Err(EnsembleError::DuplicateVoter {
                    model_id: v.clone(),
                });
            }
        }
        let mut predictions: BTreeMap<String, Prediction> = BTreeMap::new();
        for (question_id, stored) in per_question_votes {
            let subset: Vec<ModelVote> = voters
                .iter()
                .map(|m| {
                    Ok(ModelVote {
                        model_id: m.clone(),
                        vote: stored.vote_of(m)?,
                    })
                })
                .collect::<Result<_, EnsembleError>>()?;
            let accepted = vote(
                &VoteVector {
                    question_id: question_id.clone(),
                    votes: subset,
                },
                cfg,
            )?;
            predictions.insert(
                question_id.clone(),
                if accepted {
                    Prediction::Positive
                } else {
                    Prediction::Negative
                },
            );
        }
        let c = confusion(&predictions, labels)?;
        rows.push(VotingReportRow {
            n: cfg.n,
            k: cfg.k,
            voters: voters.clone(),
            confusion: c,
            scores: compute_scores(c),
        });
    }
    Ok(rows)
}

/// Turn one trace file per model into a vote store. Every run must cover
/// exactly the same question ids; the roster order is the order of `runs`.
pub fn votes_from_traces(
    runs: &[Vec<VerificationTrace>],
) -> Result<BTreeMap<String, VoteVector>, EnsembleError> {
    if runs.is_empty() {
        return Err(EnsembleError::Config(
            "at least one trace run is required".to_string(),
        ));
    }
    let mut roster: Vec<String> = Vec::new();
    let mut by_model: Vec<BTreeMap<&str, Prediction>> = Vec::new();
    let mut reference_ids: Option<BTreeSet<&str>> = None;

    for run in runs {
        let model_id = match run.first() {
            Some(t) => t.model_id.clone(),
            None => {
                return Err(EnsembleError::Config(
                    "a trace run is empty".to_string(),
                ))
            }
        };
        if roster.contains(&model_id) {
            return Err(EnsembleError::DuplicateVoter {
                model_id,
            });
        }
        let mut votes: BTreeMap<&str, Prediction> = BTreeMap::new();
        for t in run {
            if t.model_id != model_id {
                return Err(EnsembleError::IdSetMismatch {
                    model_id: model_id.clone(),
                    detail: format!("run mixes in traces from {}", t.model_id),
                });
            }
            if votes
                .insert(&t.question_id, Prediction::from_final(t.verdict))
                .is_some()
            {
                return Err(EnsembleError::IdSetMismatch {
                    model_id: model_id.clone(),
                    detail: format!("question {} appears twice", t.question_id),
                });
            }
        }
        let ids: BTreeSet<&str> = votes.keys().copied().collect();
        match &reference_ids {
            None => reference_ids = Some(ids),
            Some(reference) => {
                if *reference != ids {
                    let missing: Vec<&&str> = reference.difference(&ids).collect();
                    let extra: Vec<&&str> = ids.difference(reference).collect();
                    return Err(EnsembleError::IdSetMismatch {
                        model_id: model_id.clone(),
                        detail: format!("missing {missing:?}, unexpected {extra:?}"),
                    });
                }
            }
        }
        roster.push(model_id);
        by_model.push(votes);
    }

    let mut store = BTreeMap::new();
    for id in reference_ids.expect("at least one run") {
        let votes = roster
            .iter()
            .zip(&by_model)
            .map(|(model_id, votes)| ModelVote {
                model_id: model_id.clone(),
                vote: votes[id],
            })
            .collect();
        store.insert(
            id.to_string(),
            VoteVector {
                question_id: id.to_string(),
                votes,
            },
        );
    }
    Ok(store)
}

/// Write the vote store as JSONL, one question per line in id order.
pub fn save_votes(
    path: impl AsRef<Path>,
    store: &BTreeMap<String, VoteVector>,
) -> Result<(), EnsembleError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| EnsembleError::Io {
        context: format!("creating {}", path.display()),
        source,
    })?;
    let mut out = BufWriter::new(file);
    for vector in store.values() {
        serde_json::to_writer(&mut out, vector).map_err(|e| EnsembleError::VoteFile {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|source| EnsembleError::Io {
            context: format!("writing {}", path.display()),
            source,
        })?;
    }
    out.flush().map_err(|source| EnsembleError::Io {
        context: format!("flushing {}", path.display()),
        source,
    })
}

pub fn load_votes(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, VoteVector>, EnsembleError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EnsembleError::Io {
        context: format!("opening {}", path.display()),
        source,
    })?;
    let mut store = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EnsembleError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let vector: VoteVector =
            serde_json::from_str(&line).map_err(|e| EnsembleError::VoteFile {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        // re-validate the distinct-voter invariant on the way in
        let vector = VoteVector::new(vector.question_id, vector.votes)?;
        if store.insert(vector.question_id.clone(), vector).is_some() {
            return Err(EnsembleError::VoteFile {
                path: path.display().to_string(),
                line: i + 1,
                message: "duplicate question id".to_string(),
            });
        }
    }
    Ok(store)
}
