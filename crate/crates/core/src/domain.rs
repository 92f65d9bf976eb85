//! Domain types shared across the verification pipeline, plus the pure logic
//! that combines per-stage verdicts into a final decision.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by domain-level contract violations.
#[derive(Debug, Error)]
pub enum DomainError {
    #[error("duplicate verdict for stage {0}")]
    DuplicateStage(StageId),
    #[error("question id must be non-empty")]
    EmptyId,
    #[error("question text must be non-empty (id: {0})")]
    EmptyText(String),
    #[error("difficulty must be finite (id: {0})")]
    NonFiniteDifficulty(String),
    #[error("label validity and error category disagree: validity={validity}, category={category}")]
    InconsistentLabel { validity: bool, category: ErrorCategory },
    #[error("decomposition {kind} at position {index} has empty text")]
    EmptyDecompositionEntry { kind: &'static str, index: usize },
    #[error("decomposition must contain at least one goal")]
    NoGoals,
    #[error("unknown stage name: {0:?}")]
    UnknownStage(String),
    #[error("unknown error category: {0:?}")]
    UnknownErrorCategory(String),
}

/// The five pipeline stages, in execution order.
///
/// The derived `Ord` follows declaration order, so `S1Instruction` sorts
/// before `S5Completeness`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "s1")]
    S1Instruction,
    #[serde(rename = "s2")]
    S2Linguistic,
    #[serde(rename = "s3")]
    S3AtomicCondition,
    #[serde(rename = "s4")]
    S4Contradiction,
    #[serde(rename = "s5")]
    S5Completeness,
}

impl StageId {
    /// All stages in pipeline order.
    pub const ALL: [StageId; 5] = [
        StageId::S1Instruction,
        StageId::S2Linguistic,
        StageId::S3AtomicCondition,
        StageId::S4Contradiction,
        StageId::S5Completeness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::S1Instruction => "s1",
            StageId::S2Linguistic => "s2",
            StageId::S3AtomicCondition => "s3",
            StageId::S4Contradiction => "s4",
            StageId::S5Completeness => "s5",
        }
    }

    /// The error category detected by this stage (fixed bijection).
    pub fn error_category(self) -> ErrorCategory {
        match self {
            StageId::S1Instruction => ErrorCategory::InstructionError,
            StageId::S2Linguistic => ErrorCategory::NonsemanticError,
            StageId::S3AtomicCondition => ErrorCategory::MinimalDomainError,
            StageId::S4Contradiction => ErrorCategory::ContradictionError,
            StageId::S5Completeness => ErrorCategory::CompletenessError,
        }
    }

    /// True for the stages that consume a decomposition (S3–S5).
    pub fn needs_decomposition(self) -> bool {
        matches!(
            self,
            StageId::S3AtomicCondition | StageId::S4Contradiction | StageId::S5Completeness
        )
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s1" => Ok(StageId::S1Instruction),
            "s2" => Ok(StageId::S2Linguistic),
            "s3" => Ok(StageId::S3AtomicCondition),
            "s4" => Ok(StageId::S4Contradiction),
            "s5" => Ok(StageId::S5Completeness),
            other => Err(DomainError::UnknownStage(other.to_string())),
        }
    }
}

/// Ground-truth error category of a question. `None` marks a correct question;
/// the five error variants map one-to-one onto the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    None,
    InstructionError,
    NonsemanticError,
    MinimalDomainError,
    ContradictionError,
    CompletenessError,
}

impl ErrorCategory {
    /// The five error variants, in stage order.
    pub const ERRORS: [ErrorCategory; 5] = [
        ErrorCategory::InstructionError,
        ErrorCategory::NonsemanticError,
        ErrorCategory::MinimalDomainError,
        ErrorCategory::ContradictionError,
        ErrorCategory::CompletenessError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::None => "none",
            ErrorCategory::InstructionError => "instruction_error",
            ErrorCategory::NonsemanticError => "nonsemantic_error",
            ErrorCategory::MinimalDomainError => "minimal_domain_error",
            ErrorCategory::ContradictionError => "contradiction_error",
            ErrorCategory::CompletenessError => "completeness_error",
        }
    }

    /// The stage that detects this error; `None` for correct questions.
    pub fn stage(self) -> Option<StageId> {
        match self {
            ErrorCategory::None => None,
            ErrorCategory::InstructionError => Some(StageId::S1Instruction),
            ErrorCategory::NonsemanticError => Some(StageId::S2Linguistic),
            ErrorCategory::MinimalDomainError => Some(StageId::S3AtomicCondition),
            ErrorCategory::ContradictionError => Some(StageId::S4Contradiction),
            ErrorCategory::CompletenessError => Some(StageId::S5Completeness),
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ErrorCategory::None),
            "instruction_error" => Ok(ErrorCategory::InstructionError),
            "nonsemantic_error" => Ok(ErrorCategory::NonsemanticError),
            "minimal_domain_error" => Ok(ErrorCategory::MinimalDomainError),
            "contradiction_error" => Ok(ErrorCategory::ContradictionError),
            "completeness_error" => Ok(ErrorCategory::CompletenessError),
            other => Err(DomainError::UnknownErrorCategory(other.to_string())),
        }
    }
}

/// Ground-truth validity label. `validity` is true exactly when
/// `error_category` is `None`; construct through [`GroundTruth::valid`] /
/// [`GroundTruth::invalid`] or [`GroundTruth::new`] to keep that invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub validity: bool,
    pub error_category: ErrorCategory,
}

impl GroundTruth {
    pub fn new(validity: bool, error_category: ErrorCategory) -> Result<Self, DomainError> {
        if validity != (error_category == ErrorCategory::None) {
            return Err(DomainError::InconsistentLabel {
                validity,
                category: error_category,
            });
        }
        Ok(Self {
            validity,
            error_category,
        })
    }

    pub fn valid() -> Self {
        Self {
            validity: true,
            error_category: ErrorCategory::None,
        }
    }

    pub fn invalid(error_category: ErrorCategory) -> Result<Self, DomainError> {
        Self::new(false, error_category)
    }
}

/// One dataset record: the question text plus optional ground-truth and
/// classification labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MathQuestion {
    pub id: String,
    pub text: String,
    pub label: Option<GroundTruth>,
    pub category: Option<String>,
    pub subcategory: Option<String>,
    pub difficulty: Option<f64>,
    /// Unknown record fields, preserved verbatim for round-trips.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl MathQuestion {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: None,
            category: None,
            subcategory: None,
            difficulty: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_label(mut self, label: GroundTruth) -> Self {
        self.label = Some(label);
        self
    }

    /// Check the record-level invariants: non-empty id, non-blank text,
    /// finite difficulty.
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.is_empty() {
            return Err(DomainError::EmptyId);
        }
        if self.text.trim().is_empty() {
            return Err(DomainError::EmptyText(self.id.clone()));
        }
        if let Some(d) = self.difficulty {
            if !d.is_finite() {
                return Err(DomainError::NonFiniteDifficulty(self.id.clone()));
            }
        }
        Ok(())
    }
}

/// A single extracted mathematical fact (`P_j`). The 1-based index matches
/// the condition's position in its parent list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicCondition {
    pub index: usize,
    pub text: String,
}

/// A single extracted query the question asks to resolve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetGoal {
    pub index: usize,
    pub text: String,
}

/// Structured form of a question: its atomic conditions and target goals,
/// in a stable order so index `j` identifies the same condition everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    conditions: Vec<AtomicCondition>,
    goals: Vec<TargetGoal>,
}

impl Decomposition {
    /// Build from raw texts. Conditions may be empty; at least one goal is
    /// required and every text must be non-blank.
    pub fn new(
        conditions: Vec<String>,
        goals: Vec<String>,
    ) -> Result<Self, DomainError> {
        if goals.is_empty() {
            return Err(DomainError::NoGoals);
        }
        for (i, c) in conditions.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(DomainError::EmptyDecompositionEntry {
                    kind: "condition",
                    index: i + 1,
                });
            }
        }
        for (i, g) in goals.iter().enumerate() {
            if g.trim().is_empty() {
                return Err(DomainError::EmptyDecompositionEntry {
                    kind: "goal",
                    index: i + 1,
                });
            }
        }
        Ok(Self {
            conditions: conditions
                .into_iter()
                .enumerate()
                .map(|(i, text)| AtomicCondition { index: i + 1, text })
                .collect(),
            goals: goals
                .into_iter()
                .enumerate()
                .map(|(i, text)| TargetGoal { index: i + 1, text })
                .collect(),
        })
    }

    pub fn conditions(&self) -> &[AtomicCondition] {
        &self.conditions
    }

    pub fn goals(&self) -> &[TargetGoal] {
        &self.goals
    }
}

/// Outcome of a single stage check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Pass,
    Fail,
    /// No verdict could be extracted from the model output (or the call
    /// itself failed); reported separately, never folded into Pass/Fail.
    Invalid,
}

/// Which parsing path produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseSource {
    RuleBased,
    JudgeFallback,
}

/// The three named sub-checks of the instruction stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct S1Flags {
    pub is_math_question: bool,
    pub has_misleading_cue: bool,
    pub has_answer_leak: bool,
}

impl S1Flags {
    /// The stage-1 indicator: pass iff the item is a math question with no
    /// misleading cue and no answer leak.
    pub fn implies_pass(self) -> bool {
        self.is_math_question && !self.has_misleading_cue && !self.has_answer_leak
    }
}

/// Outcome of one verification stage for one question, with full parse
/// provenance for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageVerdict {
    pub stage: StageId,
    pub outcome: StageOutcome,
    /// Free-text reasoning recovered from the verifier output, or an error
    /// note when the outcome is `Invalid`.
    pub rationale: String,
    /// Full completion text as returned by the model.
    pub raw_output: String,
    pub parse_source: ParseSource,
    /// Present only for stage 1, and only when all three flag lines parsed.
    pub sub_flags: Option<S1Flags>,
}

/// Final decision for one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalVerdict {
    Valid,
    Invalid,
    /// At least one stage produced no usable verdict and no stage failed:
    /// the question cannot be judged, and is reported separately rather
    /// than silently retained or discarded.
    Unjudgeable,
}

/// Ordered record of one question's trip through the pipeline under one
/// model/config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTrace {
    pub question_id: String,
    pub model_id: String,
    pub executed: Vec<StageVerdict>,
    /// Stages that were ablated or short-circuited; never synthesized as
    /// passes, so reports can distinguish "passed" from "not run".
    pub skipped: BTreeSet<StageId>,
    #[serde(rename = "final")]
    pub verdict: FinalVerdict,
    pub first_failure: Option<StageId>,
    pub decomposition: Option<Decomposition>,
}

impl VerificationTrace {
    /// Assemble a trace, computing the final verdict and first failure from
    /// the executed verdicts.
    pub fn from_parts(
        question_id: impl Into<String>,
        model_id: impl Into<String>,
        executed: Vec<StageVerdict>,
        skipped: BTreeSet<StageId>,
        decomposition: Option<Decomposition>,
    ) -> Result<Self, DomainError> {
        let verdict = final_verdict(&executed)?;
        let first = first_failure(&executed)?;
        Ok(Self {
            question_id: question_id.into(),
            model_id: model_id.into(),
            executed,
            skipped,
            verdict,
            first_failure: first,
            decomposition,
        })
    }
}

fn check_distinct(executed: &[StageVerdict]) -> Result<(), DomainError> {
    let mut seen = BTreeSet::new();
    for v in executed {
        if !seen.insert(v.stage) {
            return Err(DomainError::DuplicateStage(v.stage));
        }
    }
    Ok(())
}

/// Combine executed stage verdicts into a final decision.
///
/// Conjunction semantics over executed stages only: any `Fail` makes the
/// question `Invalid` (a demonstrated flaw is never masked by an unparseable
/// verdict), any `Invalid` with no `Fail` makes it `Unjudgeable`, and
/// all-pass makes it `Valid`. Stages absent from `executed` contribute
/// nothing.
pub fn final_verdict(executed: &[StageVerdict]) -> Result<FinalVerdict, DomainError> {
    check_distinct(executed)?;
    let mut saw_invalid = false;
    for v in executed {
        match v.outcome {
            StageOutcome::Fail => return Ok(FinalVerdict::Invalid),
            StageOutcome::Invalid => saw_invalid = true,
            StageOutcome::Pass => {}
        }
    }
    if saw_invalid {
        Ok(FinalVerdict::Unjudgeable)
    } else {
        Ok(FinalVerdict::Valid)
    }
}

/// The earliest failing stage among the executed verdicts, if any.
pub fn first_failure(executed: &[StageVerdict]) -> Result<Option<StageId>, DomainError> {
    check_distinct(executed)?;
    Ok(executed
        .iter()
        .filter(|v| v.outcome == StageOutcome::Fail)
        .map(|v| v.stage)
        .min())
}
