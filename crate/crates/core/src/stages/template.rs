//! Prompt templates. Each template is one text file: the FIRST line is the
//! system text (may be blank), everything after it is the user template.
//! Placeholders `{question}`, `{conditions}`, `{goals}`, `{raw_output}` are
//! substituted in a single pass, so substituted values are never rescanned
//! and literal braces in question texts (LaTeX and friends) survive intact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::{Captures, Regex};
use sha2::{Digest, Sha256};

use super::StageError;
use crate::domain::{Decomposition, StageId};
use crate::gateway::CallKind;

static PLACEHOLDER_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\{(question|conditions|goals|raw_output)\}").unwrap());

/// Placeholders a template of this kind may and must reference.
fn placeholder_rules(kind: CallKind) -> (&'static [&'static str], &'static [&'static str]) {
    use StageId::*;
    match kind {
        CallKind::Stage(S1Instruction) | CallKind::Stage(S2Linguistic) | CallKind::Decompose => {
            (&["question"], &["question"])
        }
        CallKind::Stage(S3AtomicCondition) | CallKind::Stage(S4Contradiction) => {
            (&["question", "conditions"], &["conditions"])
        }
        CallKind::Stage(S5Completeness) => {
            (&["question", "conditions", "goals"], &["conditions", "goals"])
        }
        CallKind::Judge => (&["raw_output"], &["raw_output"]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: CallKind,
    pub system_text: String,
    pub user_template: String,
}

impl PromptTemplate {
    /// Parse the file convention: first line system text, remainder user
    /// template. Validates the placeholder contract for `kind`.
    pub fn parse(kind: CallKind, raw: &str) -> Result<Self, StageError> {
        let (system, user) = raw.split_once('\n').unwrap_or((raw, ""));
        if user.trim().is_empty() {
            return Err(StageError::Template {
                kind,
                message: "user template is empty; the first line is reserved for the system text"
                    .to_string(),
            });
        }
        let template = Self {
            kind,
            system_text: system.trim_end().to_string(),
            user_template: user.to_string(),
        };
        let (allowed, required) = placeholder_rules(kind);
        let present = template.placeholders();
        for name in &present {
            if !allowed.contains(&name.as_str()) {
                return Err(StageError::Template {
                    kind,
                    message: format!(
                        "placeholder {{{name}}} is not available to {kind} prompts \
                         (allowed: {allowed:?})"
                    ),
                });
            }
        }
        for name in required {
            if !present.contains(*name) {
                return Err(StageError::Template {
                    kind,
                    message: format!("required placeholder {{{name}}} is missing"),
                });
            }
        }
        Ok(template)
    }

    /// Known placeholders referenced anywhere in the template.
    pub fn placeholders(&self) -> BTreeSet<String> {
        PLACEHOLDER_RE
            .captures_iter(&format!("{}\n{}", self.system_text, self.user_template))
            .map(|c| c[1].to_string())
            .collect()
    }

    /// Canonical digest of the template text, for run manifests.
    pub fn digest(&self) -> String {
        let canonical = format!("{}\n{}", self.system_text, self.user_template);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<(String, String), StageError> {
        let substitute = |text: &str| -> Result<String, StageError> {
            let mut missing = None;
            let out = PLACEHOLDER_RE.replace_all(text, |caps: &Captures| {
                let name = caps.get(1).expect("placeholder name group").as_str();
                match bindings.get(name) {
                    Some(value) => value.clone(),
                    None => {
                        missing.get_or_insert_with(|| name.to_string());
                        String::new()
                    }
                }
            });
            match missing {
                Some(name) => Err(StageError::Render {
                    kind: self.kind,
                    message: format!("placeholder {{{name}}} has no bound value"),
                }),
                None => Ok(out.into_owned()),
            }
        };
        Ok((substitute(&self.system_text)?, substitute(&self.user_template)?))
    }
}

/// Conditions as the numbered list the prompts show: `P<j>: <text>`.
pub fn format_conditions(decomposition: &Decomposition) -> String {
    if decomposition.conditions().is_empty() {
        return "(none)".to_string();
    }
    let mut out = String::new();
    for c in decomposition.conditions() {
        let _ = writeln!(out, "P{}: {}", c.index, c.text);
    }
    out.trim_end().to_string()
}

/// A chosen subset of conditions, keeping their original indices.
pub fn format_condition_subset(decomposition: &Decomposition, indices: &[usize]) -> String {
    let mut out = String::new();
    for c in decomposition.conditions() {
        if indices.contains(&c.index) {
            let _ = writeln!(out, "P{}: {}", c.index, c.text);
        }
    }
    let trimmed = out.trim_end();
    if trimmed.is_empty() {
        "(none)".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Goals as the numbered list the prompts show: `G<j>: <text>`.
pub fn format_goals(decomposition: &Decomposition) -> String {
    let mut out = String::new();
    for g in decomposition.goals() {
        let _ = writeln!(out, "G{}: {}", g.index, g.text);
    }
    out.trim_end().to_string()
}

/// Render a stage or decompose prompt. `conditions_override` narrows the
/// condition list (per-condition and subset checks) without renumbering.
pub fn render_prompt(
    template: &PromptTemplate,
    question_text: &str,
    decomposition: Option<&Decomposition>,
    conditions_override: Option<String>,
) -> Result<(String, String), StageError> {
    let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
    bindings.insert("question", question_text.to_string());
    if let Some(d) = decomposition {
        bindings.insert(
            "conditions",
            conditions_override.unwrap_or_else(|| format_conditions(d)),
        );
        bindings.insert("goals", format_goals(d));
    }
    template.render(&bindings)
}

/// Render the judge prompt around a raw, unparseable completion.
pub fn render_judge_prompt(
    template: &PromptTemplate,
    raw_output: &str,
) -> Result<(String, String), StageError> {
    let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
    bindings.insert("raw_output", raw_output.to_string());
    template.render(&bindings)
}

const TEMPLATE_KINDS: [CallKind; 7] = [
    CallKind::Stage(StageId::S1Instruction),
    CallKind::Stage(StageId::S2Linguistic),
    CallKind::Stage(StageId::S3AtomicCondition),
    CallKind::Stage(StageId::S4Contradiction),
    CallKind::Stage(StageId::S5Completeness),
    CallKind::Decompose,
    CallKind::Judge,
];

/// The complete prompt set: one template per stage plus decompose and judge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<CallKind, PromptTemplate>,
}

impl TemplateSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        let sources: [(CallKind, &str); 7] = [
            (TEMPLATE_KINDS[0], include_str!("../../templates/s1.txt")),
            (TEMPLATE_KINDS[1], include_str!("../../templates/s2.txt")),
            (TEMPLATE_KINDS[2], include_str!("../../templates/s3.txt")),
            (TEMPLATE_KINDS[3], include_str!("../../templates/s4.txt")),
            (TEMPLATE_KINDS[4], include_str!("../../templates/s5.txt")),
            (TEMPLATE_KINDS[5], include_str!("../../templates/decompose.txt")),
            (TEMPLATE_KINDS[6], include_str!("../../templates/judge.txt")),
        ];
        let templates = sources
            .into_iter()
            .map(|(kind, raw)| {
                let t = PromptTemplate::parse(kind, raw)
                    .unwrap_or_else(|e| panic!("builtin template {kind} invalid: {e}"));
                (kind, t)
            })
            .collect();
        Self { templates }
    }

    /// Load `<dir>/{s1..s5,decompose,judge}.txt`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, StageError> {
        let dir = dir.as_ref();
        let mut templates = BTreeMap::new();
        for kind in TEMPLATE_KINDS {
            let path = dir.join(format!("{}.txt", kind.as_str()));
            let raw = fs::read_to_string(&path).map_err(|e| StageError::TemplateFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            templates.insert(kind, PromptTemplate::parse(kind, &raw)?);
        }
        Ok(Self { templates })
    }

    /// Write the set out as a template directory (the file convention
    /// `load_dir` reads).
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (kind, t) in &self.templates {
            let path = dir.join(format!("{}.txt", kind.as_str()));
            fs::write(path, format!("{}\n{}", t.system_text, t.user_template))?;
        }
        Ok(())
    }

    pub fn get(&self, kind: CallKind) -> &PromptTemplate {
        self.templates
            .get(&kind)
            .expect("template set always holds all seven kinds")
    }

    /// Per-kind template digests, recorded in run manifests so replays can
    /// prove they used identical prompts.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(kind, t)| (kind.as_str().to_string(), t.digest()))
            .collect()
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
