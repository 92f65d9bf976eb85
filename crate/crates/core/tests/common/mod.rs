//! Shared scripted fixture: a 30-question corpus whose model behavior is
//! derived mechanically from the ground-truth labels.
//!
//! Ten questions are valid; twenty are invalid, four per error category.
//! For an invalid question the scripted model fails exactly the stage that
//! detects its category; every other stage passes. Two of the invalid
//! questions (`d04`, `g04`) are answered with prose that carries no verdict
//! line at their detecting stage, so a full pipeline run lands on
//! Unjudgeable for them instead of Invalid.
//!
//! Fixture entries are keyed by the digest of the exact rendered prompt,
//! mirroring how the pipeline renders each call: s1/s2 before any
//! decomposition exists, s3/s4/s5 with it. Every question decomposes into
//! two conditions and one goal so the contradiction stage genuinely runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use mathq_verify::dataset::QuestionSet;
use mathq_verify::domain::{Decomposition, GroundTruth};
use mathq_verify::gateway::{prompt_key, CallKind, FixtureEntry, ModelEndpoint, ScriptedBackend};
use mathq_verify::pipeline::{ExecutionMode, Pipeline, PipelineConfig};
use mathq_verify::stages::{render_prompt, TemplateSet};
use mathq_verify::{ErrorCategory, MathQuestion, StageId};

pub const ORACLE_MODEL: &str = "oracle-verifier";

/// Question ids whose scripted stage reply carries no verdict line.
pub const GARBLED_IDS: [&str; 2] = ["d04", "g04"];

struct Spec {
    id: &'static str,
    text: &'static str,
    category: ErrorCategory,
    math_category: &'static str,
    difficulty: f64,
}

fn specs() -> Vec<Spec> {
    use ErrorCategory::*;
    let rows: [(&str, &str, ErrorCategory); 30] = [
        // Ten well-posed questions.
        ("v01", "What is the sum of the first 15 positive even integers?", None),
        ("v02", "A rectangle has width 4 and perimeter 28. Find its area.", None),
        ("v03", "How many primes lie strictly between 10 and 50?", None),
        ("v04", "Solve for x: 3x + 7 = 25.", None),
        ("v05", "A fair die is rolled twice. What is the probability the sum is 7?", None),
        ("v06", "Find the greatest common divisor of 252 and 198.", None),
        ("v07", "A circle has circumference 20*pi. What is its radius?", None),
        ("v08", "How many ways can 5 distinct books be arranged on a shelf?", None),
        ("v09", "Compute the value of 2^10 - 3^6.", None),
        ("v10", "The average of five consecutive integers is 21. What is the largest?", None),
        // Contaminated instructions.
        ("i01", "Please rewrite the following so it is easier: find the roots of x^2 - 5x + 6.", InstructionError),
        ("i02", "The answer is 12. Now show that the sum of 5 and 7 equals it.", InstructionError),
        ("i03", "Summarize this paragraph about triangle inequality in one sentence.", InstructionError),
        ("i04", "Translate 'two plus two equals four' into French.", InstructionError),
        // Linguistically damaged questions.
        ("n01", "If the the number which, then how many it are for the case 7?", NonsemanticError),
        ("n02", "A train leaves at of speed 60 km what time arrive before it left?", NonsemanticError),
        ("n03", "Let x be. Find the value of when divided among.", NonsemanticError),
        ("n04", "The perimeter square of whose and side respectively, compute.", NonsemanticError),
        // Conditions violating their own domain.
        ("d01", "A triangle has area -5 and base 4. Find its height.", MinimalDomainError),
        ("d02", "A class has 7.5 students and each desk seats 3. How many desks are needed?", MinimalDomainError),
        ("d03", "Let n be a negative prime between 3 and 11. Compute n^2.", MinimalDomainError),
        ("d04", "A bag holds -3 red marbles and 5 blue ones. How many marbles are in the bag?", MinimalDomainError),
        // Mutually contradictory conditions.
        ("c01", "Let x > 9 and x < 4. How many integers x satisfy both?", ContradictionError),
        ("c02", "An isosceles triangle has sides 3, 4, and 5. Find its equal angles.", ContradictionError),
        ("c03", "A number is divisible by 4 and odd. What is its remainder mod 8?", ContradictionError),
        ("c04", "Two parallel lines intersect at point P. Find the angle at P.", ContradictionError),
        // Underspecified goals.
        ("g01", "Let a + b = 10 with a and b positive integers. Find a.", CompletenessError),
        ("g02", "A rectangle has perimeter 24. What is its area?", CompletenessError),
        ("g03", "Pick a number from the set {2, 3, 5}. What is the result?", CompletenessError),
        ("g04", "A polygon has some sides of length 2. Compute the total length.", CompletenessError),
    ];
    let math_categories = ["Algebra", "Geometry", "Number Theory", "Combinatorics"];
    rows.into_iter()
        .enumerate()
        .map(|(i, (id, text, category))| Spec {
            id,
            text,
            category,
            math_category: math_categories[i % math_categories.len()],
            difficulty: 1.0 + (i % 5) as f64,
        })
        .collect()
}

/// The 30 labeled questions, with math categories and difficulties filled in
/// so distribution comparisons have real cells to bin.
pub fn corpus_questions() -> Vec<MathQuestion> {
    specs()
        .iter()
        .map(|s| {
            let label = match s.category {
                ErrorCategory::None => GroundTruth::valid(),
                c => GroundTruth::new(false, c).expect("error category labels"),
            };
            let mut q = MathQuestion::new(s.id, s.text).with_label(label);
            q.category = Some(s.math_category.to_string());
            q.difficulty = Some(s.difficulty);
            q
        })
        .collect()
}

pub fn corpus_set() -> QuestionSet {
    QuestionSet::new(corpus_questions(), "corpus.jsonl").expect("corpus is well formed")
}

fn decomposition_for(id: &str) -> Decomposition {
    Decomposition::new(
        vec![
            format!("the quantities named in {id} are fixed by the statement"),
            format!("every value in {id} lies in its stated domain"),
        ],
        vec![format!("produce the value requested by {id}")],
    )
    .expect("two conditions, one goal")
}

fn decompose_reply(d: &Decomposition) -> String {
    let mut lines: Vec<String> = d
        .conditions()
        .iter()
        .map(|c| format!("CONDITION: {}", c.text))
        .collect();
    lines.extend(d.goals().iter().map(|g| format!("GOAL: {}", g.text)));
    lines.join("\n")
}

enum Behavior {
    Pass,
    Fail,
    Garble,
}

fn stage_reply(stage: StageId, behavior: &Behavior) -> String {
    match (stage, behavior) {
        (StageId::S1Instruction, Behavior::Pass) => "The instruction states one math task and nothing else.\nMATH-QUESTION: YES\nMISLEADING-CUE: NO\nANSWER-LEAK: NO\nVERDICT: PASS".to_string(),
        (StageId::S1Instruction, Behavior::Fail) => "The prompt smuggles in a non-solving request.\nMATH-QUESTION: YES\nMISLEADING-CUE: YES\nANSWER-LEAK: NO\nVERDICT: FAIL".to_string(),
        (StageId::S2Linguistic, Behavior::Pass) => "Grammar and references are clear.\nVERDICT: PASS".to_string(),
        (StageId::S2Linguistic, Behavior::Fail) => "Broken syntax leaves the statement unreadable.\nVERDICT: FAIL".to_string(),
        (StageId::S3AtomicCondition, Behavior::Pass) => "Each condition is satisfiable on its own.\nVERDICT: PASS".to_string(),
        (StageId::S3AtomicCondition, Behavior::Fail) => "A stated quantity violates its own domain.\nVERDICT: FAIL".to_string(),
        (StageId::S4Contradiction, Behavior::Pass) => "All conditions can hold at once.\nVERDICT: PASS".to_string(),
        (StageId::S4Contradiction, Behavior::Fail) => "Two conditions exclude each other.\nVERDICT: FAIL".to_string(),
        (StageId::S5Completeness, Behavior::Pass) => "The goal is pinned down by the conditions.\nVERDICT: PASS".to_string(),
        (StageId::S5Completeness, Behavior::Fail) => "The target quantity is never determined.\nVERDICT: FAIL".to_string(),
        (_, Behavior::Garble) => "I keep going back and forth on this one and cannot commit to a judgment.".to_string(),
    }
}

/// Scripted replies for every (question, call) the pipeline can make,
/// keyed by exact prompt digest for `model_id`.
pub fn oracle_entries(model_id: &str) -> Vec<FixtureEntry> {
    let templates = TemplateSet::builtin();
    let mut entries = Vec::new();
    for spec in specs() {
        let q = MathQuestion::new(spec.id, spec.text);
        let d = decomposition_for(spec.id);
        let failing = spec.category.stage();
        let garbled = GARBLED_IDS.contains(&spec.id);

        let (_, user) = render_prompt(templates.get(CallKind::Decompose), &q.text, None, None)
            .expect("decompose prompt");
        entries.push(FixtureEntry {
            model_id: model_id.to_string(),
            key: prompt_key(&user),
            response: decompose_reply(&d),
        });

        for stage in StageId::ALL {
            let behavior = if failing == Some(stage) {
                if garbled {
                    Behavior::Garble
                } else {
                    Behavior::Fail
                }
            } else {
                Behavior::Pass
            };
            // s1/s2 are rendered before any decomposition exists.
            let deco = stage.needs_decomposition().then_some(&d);
            let (_, user) = render_prompt(
                templates.get(CallKind::Stage(stage)),
                &q.text,
                deco,
                None,
            )
            .expect("stage prompt");
            entries.push(FixtureEntry {
                model_id: model_id.to_string(),
                key: prompt_key(&user),
                response: stage_reply(stage, &behavior),
            });
        }
    }
    entries
}

pub fn oracle_config(mode: ExecutionMode) -> PipelineConfig {
    let mut config = PipelineConfig::new(ModelEndpoint::scripted(ORACLE_MODEL, "unused.jsonl"));
    config.mode = mode;
    config
}

pub fn oracle_pipeline(mode: ExecutionMode) -> Pipeline {
    let backend = Arc::new(ScriptedBackend::from_entries(oracle_entries(ORACLE_MODEL)));
    Pipeline::with_shared_backend(oracle_config(mode), backend).expect("valid oracle config")
}

/// Writes fixture entries as JSONL for configs that load them from disk.
pub fn write_fixture_file(path: &Path, entries: &[FixtureEntry]) {
    let mut out = BufWriter::new(File::create(path).expect("create fixture file"));
    for entry in entries {
        let line = serde_json::to_string(entry).expect("fixture entry serializes");
        writeln!(out, "{line}").expect("write fixture line");
    }
    out.flush().expect("flush fixture file");
}
