//! Evaluation measures over predictions and traces: confusion counts,
//! precision/recall/F1/accuracy, unjudgeable tallies, per-slice detection
//! rates, and ablation deltas.

use std::collections::BTreeMap;
use std::io;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{ErrorCategory, FinalVerdict, StageId, StageOutcome, VerificationTrace};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction for {0:?} has no ground-truth label")]
    UnlabeledPrediction(String),
    #[error("trace for {0:?} has no ground-truth label")]
    UnlabeledTrace(String),
    #[error("trace for {question_id:?} has skipped stages; per-step rates need full traces")]
    SkippedStages { question_id: String },
    #[error("ablation runs must include a \"full\" entry")]
    MissingFullRun,
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// A binary validity prediction, or the explicit marker that no usable
/// prediction was produced.
///
/// Serialized as `1` / `0` / `"invalid"` so vote stores stay close to the
/// indicator notation they implement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Prediction {
    Positive,
    Negative,
    Invalid,
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Prediction::Positive => serializer.serialize_u64(1),
            Prediction::Negative => serializer.serialize_u64(0),
            Prediction::Invalid => serializer.serialize_str("invalid"),
        }
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PredVisitor;

        impl<'de> Visitor<'de> for PredVisitor {
            type Value = Prediction;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("0, 1, or \"invalid\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Prediction, E> {
                match v {
                    1 => Ok(Prediction::Positive),
                    0 => Ok(Prediction::Negative),
                    other => Err(E::custom(format!("vote must be 0 or 1, got {other}"))),
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Prediction, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom(format!("vote must be 0 or 1, got {v}")))
                    .and_then(|u| self.visit_u64(u))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Prediction, E> {
                if v.eq_ignore_ascii_case("invalid") {
                    Ok(Prediction::Invalid)
                } else {
                    Err(E::custom(format!("vote string must be \"invalid\", got {v:?}")))
                }
            }
        }

        deserializer.deserialize_any(PredVisitor)
    }
}

impl Prediction {
    /// Map a pipeline decision onto a vote: Valid counts as a positive
    /// prediction, Invalid as negative, Unjudgeable as no usable prediction.
    pub fn from_final(v: FinalVerdict) -> Self {
        match v {
            FinalVerdict::Valid => Prediction::Positive,
            FinalVerdict::Invalid => Prediction::Negative,
            FinalVerdict::Unjudgeable => Prediction::Invalid,
        }
    }
}

/// Confusion counts with the positive class = "question is valid".
/// Predictions marked invalid are excluded from the four cells and tallied
/// in `invalid_excluded`, so the five fields always sum to the number of
/// evaluated questions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_positive: u64,
    #[serde(rename = "fp")]
    pub false_positive: u64,
    #[serde(rename = "tn")]
    pub true_negative: u64,
    #[serde(rename = "fn")]
    pub false_negative: u64,
    pub invalid_excluded: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positive
            + self.false_positive
            + self.true_negative
            + self.false_negative
            + self.invalid_excluded
    }
}

/// Tally predictions against labels. Every predicted id must be labeled;
/// labels without a prediction are ignored so subsets can be scored.
pub fn confusion(
    predictions: &BTreeMap<String, Prediction>,
    labels: &BTreeMap<String, bool>,
) -> Result<ConfusionCounts, MetricsError> {
    let mut c = ConfusionCounts::default();
    for (id, pred) in predictions {
        let &valid = labels
            .get(id)
            .ok_or_else(|| MetricsError::UnlabeledPrediction(id.clone()))?;
        match (pred, valid) {
            (Prediction::Invalid, _) => c.invalid_excluded += 1,
            (Prediction::Positive, true) => c.true_positive += 1,
            (Prediction::Positive, false) => c.false_positive += 1,
            (Prediction::Negative, false) => c.true_negative += 1,
            (Prediction::Negative, true) => c.false_negative += 1,
        }
    }
    Ok(c)
}

/// Marks which scores had a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub accuracy: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: DegenerateFlags,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Standard scores from confusion counts. A zero denominator yields 0 and
/// sets the matching degenerate flag instead of aborting, so sweeps over
/// extreme vote configurations always produce a full table.
pub fn compute_scores(c: ConfusionCounts) -> Scores {
    let mut flags = DegenerateFlags::default();
    let tp = c.true_positive;
    let accuracy = ratio(
        tp + c.true_negative,
        tp + c.false_positive + c.true_negative + c.false_negative,
        &mut flags.accuracy,
    );
    let precision = ratio(tp, tp + c.false_positive, &mut flags.precision);
    let recall = ratio(tp, tp + c.false_negative, &mut flags.recall);
    let f1 = if precision + recall == 0.0 {
        flags.f1 = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        accuracy,
        precision,
        recall,
        f1,
        degenerate: flags,
    }
}

/// Fraction as a percentage rounded half-up to two decimal places.
pub fn percent(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

/// How "detected" is judged in per-slice rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepwiseMode {
    /// The flaw counts as detected when the final prediction is Invalid,
    /// regardless of which stage caught it. Works for any verifier.
    #[default]
    FinalDetection,
    /// The flaw counts as detected only when the stage responsible for the
    /// labeled category (either of S1/S2 for the merged slice) returned
    /// Fail. Only meaningful for this pipeline's own full traces.
    PerStageVerdict,
}

/// Detection tally for one error-category slice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceRate {
    pub detected: u64,
    pub size: u64,
}

impl SliceRate {
    /// Detection rate in [0,1]; an empty slice reports 0.
    pub fn rate(&self) -> f64 {
        if self.size == 0 {
            0.0
        } else {
            self.detected as f64 / self.size as f64
        }
    }
}

/// Per-slice detection rates: one column per stage, with the first two
/// stages merged. Slice sizes sum to the labeled invalid count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepwiseTable {
    pub s1_s2: SliceRate,
    pub s3: SliceRate,
    pub s4: SliceRate,
    pub s5: SliceRate,
}

impl StepwiseTable {
    pub fn total_size(&self) -> u64 {
        self.s1_s2.size + self.s3.size + self.s4.size + self.s5.size
    }
}

fn slice_of(cat: ErrorCategory) -> Option<fn(&mut StepwiseTable) -> &mut SliceRate> {
    match cat {
        ErrorCategory::None => None,
        ErrorCategory::InstructionError | ErrorCategory::NonsemanticError => {
            Some(|t| &mut t.s1_s2)
        }
        ErrorCategory::MinimalDomainError => Some(|t| &mut t.s3),
        ErrorCategory::ContradictionError => Some(|t| &mut t.s4),
        ErrorCategory::CompletenessError => Some(|t| &mut t.s5),
    }
}

fn stage_failed(trace: &VerificationTrace, stage: StageId) -> bool {
    trace
        .executed
        .iter()
        .any(|v| v.stage == stage && v.outcome == StageOutcome::Fail)
}

/// Per-slice detection rates over labeled traces.
///
/// Every trace must carry an error-category label and must have no skipped
/// stages: short-circuited or ablated runs cannot support per-step claims.
/// Correct-labeled questions contribute to no slice.
pub fn stepwise_accuracy(
    traces: &[VerificationTrace],
    labels: &BTreeMap<String, ErrorCategory>,
    mode: StepwiseMode,
) -> Result<StepwiseTable, MetricsError> {
    let mut table = StepwiseTable::default();
    for trace in traces {
        if !trace.skipped.is_empty() {
            return Err(MetricsError::SkippedStages {
                question_id: trace.question_id.clone(),
            });
        }
        let &cat = labels
            .get(&trace.question_id)
            .ok_or_else(|| MetricsError::UnlabeledTrace(trace.question_id.clone()))?;
        let Some(select) = slice_of(cat) else { continue };
        let detected = match mode {
            StepwiseMode::FinalDetection => trace.verdict == FinalVerdict::Invalid,
            StepwiseMode::PerStageVerdict => match cat {
                ErrorCategory::InstructionError | ErrorCategory::NonsemanticError => {
                    stage_failed(trace, StageId::S1Instruction)
                        || stage_failed(trace, StageId::S2Linguistic)
                }
                other => {
                    let stage = other.stage().expect("error category maps to a stage");
                    stage_failed(trace, stage)
                }
            },
        };
        let slot = select(&mut table);
        slot.size += 1;
        if detected {
            slot.detected += 1;
        }
    }
    Ok(table)
}

/// Number of traces whose final decision is Unjudgeable.
pub fn invalid_count(traces: &[VerificationTrace]) -> u64 {
    traces
        .iter()
        .filter(|t| t.verdict == FinalVerdict::Unjudgeable)
        .count() as u64
}

/// Signed score differences, variant minus reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDeltas {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn deltas(variant: &Scores, reference: &Scores) -> ScoreDeltas {
    ScoreDeltas {
        accuracy: variant.accuracy - reference.accuracy,
        precision: variant.precision - reference.precision,
        recall: variant.recall - reference.recall,
        f1: variant.f1 - reference.f1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub scores: Scores,
    pub vs_full: ScoreDeltas,
    pub vs_baseline: Option<ScoreDeltas>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Delta table against the "full" run (and against "baseline" when one is
/// present). The full row leads; remaining variants follow in name order.
pub fn ablation_report(runs: &BTreeMap<String, Scores>) -> Result<AblationReport, MetricsError> {
    let full = runs.get("full").ok_or(MetricsError::MissingFullRun)?;
    let baseline = runs.get("baseline");
    let mut rows = Vec::with_capacity(runs.len());
    let row = |name: &str, scores: &Scores| AblationRow {
        name: name.to_string(),
        scores: *scores,
        vs_full: deltas(scores, full),
        vs_baseline: baseline.map(|b| deltas(scores, b)),
    };
    rows.push(row("full", full));
    for (name, scores) in runs {
        if name != "full" {
            rows.push(row(name, scores));
        }
    }
    Ok(AblationReport { rows })
}

/// One model's evaluation, bundled for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub confusion: ConfusionCounts,
    pub scores: Scores,
    pub invalid_count: u64,
    pub stepwise: Option<StepwiseTable>,
    /// Why the stepwise table is absent, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stepwise_note: Option<String>,
}

fn pct_cell(x: f64) -> String {
    format!("{:.2}", percent(x))
}

/// Summary CSV: one row per report with columns
/// model, acc, f1, prec, inv, s1_s2, s3, s4, s5.
/// Score columns are percentages (2dp); stepwise cells are blank when the
/// table is unavailable.
pub fn write_summary_csv<W: io::Write>(
    w: W,
    reports: &[EvaluationReport],
) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["model", "acc", "f1", "prec", "inv", "s1_s2", "s3", "s4", "s5"])?;
    for r in reports {
        let step = |get: fn(&StepwiseTable) -> SliceRate| {
            r.stepwise
                .as_ref()
                .map(|t| pct_cell(get(t).rate()))
                .unwrap_or_default()
        };
        wtr.write_record([
            r.model_id.clone(),
            pct_cell(r.scores.accuracy),
            pct_cell(r.scores.f1),
            pct_cell(r.scores.precision),
            r.invalid_count.to_string(),
            step(|t| t.s1_s2),
            step(|t| t.s3),
            step(|t| t.s4),
            step(|t| t.s5),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row of a threshold-voting sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingReportRow {
    pub n: usize,
    pub k: usize,
    pub voters: Vec<String>,
    pub confusion: ConfusionCounts,
    pub scores: Scores,
}

/// Voting sweep CSV: columns n, k, voters, precision, recall, f1, tp, fp.
/// Scores are percentages (2dp); voters are joined with '+'.
pub fn write_voting_csv<W: io::Write>(
    w: W,
    rows: &[VotingReportRow],
) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["n", "k", "voters", "precision", "recall", "f1", "tp", "fp"])?;
    for r in rows {
        wtr.write_record([
            r.n.to_string(),
            r.k.to_string(),
            r.voters.join("+"),
            pct_cell(r.scores.precision),
            pct_cell(r.scores.recall),
            pct_cell(r.scores.f1),
            r.confusion.true_positive.to_string(),
            r.confusion.false_positive.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Ablation CSV: columns variant, acc, prec, recall, f1, d_prec, d_f1
/// (deltas vs the full run, percentage points, 2dp).
pub fn write_ablation_csv<W: io::Write>(
    w: W,
    report: &AblationReport,
) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["variant", "acc", "prec", "recall", "f1", "d_prec", "d_f1"])?;
    for row in &report.rows {
        wtr.write_record([
            row.name.clone(),
            pct_cell(row.scores.accuracy),
            pct_cell(row.scores.precision),
            pct_cell(row.scores.recall),
            pct_cell(row.scores.f1),
            format!("{:+.2}", percent(row.vs_full.precision)),
            format!("{:+.2}", percent(row.vs_full.f1)),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
