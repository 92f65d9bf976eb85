//! The five verification stages and the decomposition step.
//!
//! Stage semantics live here; the wording of each check lives in the
//! prompt templates. A stage run is: render the prompt, complete it
//! through the gateway, read the verdict rule-first with an optional
//! judge-model fallback. `run_stage` is total so a batch over thousands
//! of questions never aborts on one flaky call.

mod parse;
mod template;

pub use parse::{extract_verdict, parse_decomposition, ParsedVerdict};
pub use template::{
    format_condition_subset, format_conditions, format_goals, render_judge_prompt, render_prompt,
    PromptTemplate, TemplateSet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Decomposition, MathQuestion, ParseSource, StageId, StageOutcome, StageVerdict,
};
use crate::gateway::{CallKind, GatewayError, ModelClient};

/// Exhaustive contradiction checking issues one call per condition subset,
/// which is exponential; past this many conditions the mode refuses.
pub const MAX_EXHAUSTIVE_CONDITIONS: usize = 5;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{kind} template: {message}")]
    Template { kind: CallKind, message: String },
    #[error("template file {path}: {message}")]
    TemplateFile { path: String, message: String },
    #[error("rendering {kind} prompt: {message}")]
    Render { kind: CallKind, message: String },
    #[error("stage {stage} requires a decomposition but none was supplied")]
    MissingDecomposition { stage: StageId },
    #[error("decomposition failed: {message}")]
    Decomposition { message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// How the atomic-condition stage examines the condition list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionCheckMode {
    /// One call over the full list.
    #[default]
    Joint,
    /// One call per condition; the stage passes iff every condition does.
    PerCondition,
}

/// How the contradiction stage quantifies over condition subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContradictionCheckMode {
    /// One call over the full set.
    #[default]
    Joint,
    /// One call per subset of size >= 2, for small-instance validation
    /// only (capped at [`MAX_EXHAUSTIVE_CONDITIONS`]).
    ExhaustiveSubsets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOptions {
    pub s3_mode: ConditionCheckMode,
    pub s4_mode: ContradictionCheckMode,
}

/// Ask the judge model to read an unparseable completion and state the
/// intended verdict. The judge's own reply goes through the same
/// rule-based extraction; if that is also unparseable the result stays
/// Invalid. Gateway errors propagate to the caller.
pub fn judge_fallback(
    raw_output: &str,
    judge: &ModelClient,
    templates: &TemplateSet,
) -> Result<ParsedVerdict, StageError> {
    let (system, user) = render_judge_prompt(templates.get(CallKind::Judge), raw_output)?;
    let completion = judge.complete(CallKind::Judge, &system, &user)?;
    let mut parsed = extract_verdict(&completion.text);
    parsed.parse_source = ParseSource::JudgeFallback;
    parsed.sub_flags = None;
    parsed.rationale = completion.text.trim().to_string();
    Ok(parsed)
}

/// Extract the question's given facts and target goals through the model.
pub fn decompose(
    question: &MathQuestion,
    client: &ModelClient,
    templates: &TemplateSet,
) -> Result<Decomposition, StageError> {
    let (system, user) = render_prompt(
        templates.get(CallKind::Decompose),
        &question.text,
        None,
        None,
    )?;
    let completion = client.complete(CallKind::Decompose, &system, &user)?;
    parse_decomposition(&completion.text)
}

/// Run one verification stage against one question. Total: every failure
/// mode (missing inputs, template problems, gateway errors after retries)
/// lands as an `Invalid` verdict carrying an error note, never a panic or
/// an abort.
pub fn run_stage(
    stage: StageId,
    question: &MathQuestion,
    decomposition: Option<&Decomposition>,
    client: &ModelClient,
    judge: Option<&ModelClient>,
    templates: &TemplateSet,
    options: &StageOptions,
) -> StageVerdict {
    run_stage_inner(
        stage,
        question,
        decomposition,
        client,
        judge,
        templates,
        options,
    )
    .unwrap_or_else(|e| StageVerdict {
        stage,
        outcome: StageOutcome::Invalid,
        rationale: format!("stage did not produce a verdict: {e}"),
        raw_output: String::new(),
        parse_source: ParseSource::RuleBased,
        sub_flags: None,
    })
}

fn run_stage_inner(
    stage: StageId,
    question: &MathQuestion,
    decomposition: Option<&Decomposition>,
    client: &ModelClient,
    judge: Option<&ModelClient>,
    templates: &TemplateSet,
    options: &StageOptions,
) -> Result<StageVerdict, StageError> {
    let decomposition = if stage.needs_decomposition() {
        Some(decomposition.ok_or(StageError::MissingDecomposition { stage })?)
    } else {
        None
    };

    // Degenerate condition lists are decided without a model call: zero
    // conditions are vacuously valid, and contradiction needs two parties.
    if let Some(d) = decomposition {
        if stage == StageId::S3AtomicCondition && d.conditions().is_empty() {
            return Ok(pass_without_call(
                stage,
                "vacuously valid: the question states no conditions",
            ));
        }
        if stage == StageId::S4Contradiction && d.conditions().len() < 2 {
            return Ok(pass_without_call(
                stage,
                "vacuously consistent: fewer than two conditions",
            ));
        }
    }

    match stage {
        StageId::S3AtomicCondition if options.s3_mode == ConditionCheckMode::PerCondition => {
            run_per_condition(
                question,
                decomposition.expect("checked above"),
                client,
                judge,
                templates,
            )
        }
        StageId::S4Contradiction
            if options.s4_mode == ContradictionCheckMode::ExhaustiveSubsets =>
        {
            run_exhaustive_subsets(
                question,
                decomposition.expect("checked above"),
                client,
                judge,
                templates,
            )
        }
        _ => {
            let (raw, parsed) =
                stage_call(stage, question, decomposition, None, client, judge, templates)?;
            Ok(assemble(stage, raw, parsed))
        }
    }
}

fn pass_without_call(stage: StageId, rationale: &str) -> StageVerdict {
    StageVerdict {
        stage,
        outcome: StageOutcome::Pass,
        rationale: rationale.to_string(),
        raw_output: String::new(),
        parse_source: ParseSource::RuleBased,
        sub_flags: None,
    }
}

/// One render-complete-parse round trip, with the judge fallback applied
/// when the rule-based pass comes back Invalid.
fn stage_call(
    stage: StageId,
    question: &MathQuestion,
    decomposition: Option<&Decomposition>,
    conditions_override: Option<String>,
    client: &ModelClient,
    judge: Option<&ModelClient>,
    templates: &TemplateSet,
) -> Result<(String, ParsedVerdict), StageError> {
    let kind = CallKind::Stage(stage);
    let (system, user) = render_prompt(
        templates.get(kind),
        &question.text,
        decomposition,
        conditions_override,
    )?;
    let completion = client.complete(kind, &system, &user)?;
    let mut parsed = extract_verdict(&completion.text);
    if parsed.outcome == StageOutcome::Invalid {
        if let Some(judge) = judge {
            parsed = judge_fallback(&completion.text, judge, templates)?;
        }
    }
    Ok((completion.text, parsed))
}

fn assemble(stage: StageId, raw_output: String, parsed: ParsedVerdict) -> StageVerdict {
    let rationale = if parsed.outcome == StageOutcome::Invalid && parsed.rationale.is_empty() {
        "no verdict line found in model output".to_string()
    } else {
        parsed.rationale
    };
    StageVerdict {
        stage,
        outcome: parsed.outcome,
        rationale,
        raw_output,
        parse_source: parsed.parse_source,
        // flag lines are a stage-1 contract; other stages never carry them
        sub_flags: if stage == StageId::S1Instruction {
            parsed.sub_flags
        } else {
            None
        },
    }
}

/// Verdicts from several sub-calls folded into one stage verdict: any Fail
/// fails the stage, otherwise any Invalid withholds judgment, otherwise
/// the stage passes.
struct RollUp {
    sections: Vec<String>,
    first_fail: Option<(String, String)>,
    first_invalid: Option<String>,
    fallback_used: bool,
}

impl RollUp {
    fn new() -> Self {
        Self {
            sections: Vec::new(),
            first_fail: None,
            first_invalid: None,
            fallback_used: false,
        }
    }

    fn record(&mut self, label: String, raw: String, parsed: &ParsedVerdict) {
        self.sections.push(format!("=== {label} ===\n{raw}"));
        if parsed.parse_source == ParseSource::JudgeFallback {
            self.fallback_used = true;
        }
        match parsed.outcome {
            StageOutcome::Fail => {
                if self.first_fail.is_none() {
                    self.first_fail = Some((label, parsed.rationale.clone()));
                }
            }
            StageOutcome::Invalid => {
                if self.first_invalid.is_none() {
                    self.first_invalid = Some(label);
                }
            }
            StageOutcome::Pass => {}
        }
    }

    fn finish(self, stage: StageId, fail_noun: &str, pass_rationale: String) -> StageVerdict {
        let (outcome, rationale) = if let Some((label, why)) = self.first_fail {
            let mut msg = format!("{fail_noun} {label} failed");
            if !why.is_empty() {
                msg.push_str(": ");
                msg.push_str(&why);
            }
            (StageOutcome::Fail, msg)
        } else if let Some(label) = self.first_invalid {
            (
                StageOutcome::Invalid,
                format!("{fail_noun} {label} produced no verdict"),
            )
        } else {
            (StageOutcome::Pass, pass_rationale)
        };
        StageVerdict {
            stage,
            outcome,
            rationale,
            raw_output: self.sections.join("\n\n"),
            parse_source: if self.fallback_used {
                ParseSource::JudgeFallback
            } else {
                ParseSource::RuleBased
            },
            sub_flags: None,
        }
    }
}

fn run_per_condition(
    question: &MathQuestion,
    d: &Decomposition,
    client: &ModelClient,
    judge: Option<&ModelClient>,
    templates: &TemplateSet,
) -> Result<StageVerdict, StageError> {
    let stage = StageId::S3AtomicCondition;
    let mut roll = RollUp::new();
    for c in d.conditions() {
        let subset = template::format_condition_subset(d, &[c.index]);
        let (raw, parsed) =
            stage_call(stage, question, Some(d), Some(subset), client, judge, templates)?;
        roll.record(format!("P{}", c.index), raw, &parsed);
    }
    let n = d.conditions().len();
    Ok(roll.finish(
        stage,
        "condition",
        format!("all {n} conditions individually valid"),
    ))
}

fn run_exhaustive_subsets(
    question: &MathQuestion,
    d: &Decomposition,
    client: &ModelClient,
    judge: Option<&ModelClient>,
    templates: &TemplateSet,
) -> Result<StageVerdict, StageError> {
    let stage = StageId::S4Contradiction;
    let n = d.conditions().len();
    if n > MAX_EXHAUSTIVE_CONDITIONS {
        return Ok(StageVerdict {
            stage,
            outcome: StageOutcome::Invalid,
            rationale: format!(
                "exhaustive subset checking is capped at {MAX_EXHAUSTIVE_CONDITIONS} \
                 conditions but this question has {n}; use the joint mode"
            ),
            raw_output: String::new(),
            parse_source: ParseSource::RuleBased,
            sub_flags: None,
        });
    }
    // subsets in (size, then bitmask) order: pairs first, full set last
    let mut masks: Vec<u32> = (0..(1u32 << n)).filter(|m| m.count_ones() >= 2).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    let mut roll = RollUp::new();
    for mask in &masks {
        let indices: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect();
        let label = format!(
            "{{{}}}",
            indices
                .iter()
                .map(|i| format!("P{i}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let subset = template::format_condition_subset(d, &indices);
        let (raw, parsed) =
            stage_call(stage, question, Some(d), Some(subset), client, judge, templates)?;
        roll.record(label, raw, &parsed);
    }
    Ok(roll.finish(
        stage,
        "subset",
        format!("all {} condition subsets are mutually consistent", masks.len()),
    ))
}
