//! Rule-based extraction of verdicts and decompositions from completion
//! text. Total functions: malformed text yields `Invalid` or a parse error
//! value, never a panic.
//!
//! Contract lines are ASCII and line-anchored. The verdict is the LAST
//! `VERDICT: PASS|FAIL` line in the text, so a model that restates the
//! format before deciding is still read correctly.

use once_cell::sync::Lazy;
use regex::Regex;

use crate::domain::{Decomposition, ParseSource, S1Flags, StageOutcome};

use super::StageError;

// Leading markup tolerated before a contract token: list bullets, heading
// markers, quotes, emphasis. Never letters or digits, so a token buried in
// a sentence does not count as line-anchored.
static VERDICT_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?mi)^[ \t*_#>`\-]*verdict[ \t*_`]*[:\-]?[ \t*_`]*(pass|fail)\b").unwrap()
});
static MATH_QUESTION_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?mi)^[ \t*_#>`\-]*math[ \t_\-]*question[ \t*_`]*[:\-][ \t*_`]*(yes|no)\b")
        .unwrap()
});
static MISLEADING_CUE_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?mi)^[ \t*_#>`\-]*misleading[ \t_\-]*cue[ \t*_`]*[:\-][ \t*_`]*(yes|no)\b")
        .unwrap()
});
static ANSWER_LEAK_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?mi)^[ \t*_#>`\-]*answer[ \t_\-]*leak[ \t*_`]*[:\-][ \t*_`]*(yes|no)\b")
        .unwrap()
});
static CONDITION_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?mi)^[ \t]*(?:\d+[.)][ \t]*)?(?:[*\-][ \t]*)?condition[ \t]*[:\-][ \t]*(.+)$")
        .unwrap()
});
static GOAL_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?mi)^[ \t]*(?:\d+[.)][ \t]*)?(?:[*\-][ \t]*)?goal[ \t]*[:\-][ \t]*(.+)$")
        .unwrap()
});

/// Outcome recovered from one completion, before it is bound to a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub outcome: StageOutcome,
    pub sub_flags: Option<S1Flags>,
    pub parse_source: ParseSource,
    /// Reasoning preceding the contract lines, trimmed. Empty when nothing
    /// was parsed.
    pub rationale: String,
}

impl ParsedVerdict {
    fn invalid() -> Self {
        Self {
            outcome: StageOutcome::Invalid,
            sub_flags: None,
            parse_source: ParseSource::RuleBased,
            rationale: String::new(),
        }
    }
}

/// Last yes/no value of one flag line, with the match start for rationale
/// trimming.
fn last_flag(re: &Regex, text: &str) -> Option<(bool, usize)> {
    re.captures_iter(text).last().map(|c| {
        let yes = c
            .get(1)
            .expect("flag capture group")
            .as_str()
            .eq_ignore_ascii_case("yes");
        (yes, c.get(0).expect("whole match").start())
    })
}

/// Parse a completion into Pass/Fail/Invalid.
///
/// When all three instruction-check flag lines are present, the outcome is
/// their conjunction (math question, no misleading cue, no answer leak) and
/// the flags are reported; a disagreeing `VERDICT:` line loses, since the
/// flags are the finer-grained statement. Otherwise the last `VERDICT:`
/// line decides. With neither, the completion is Invalid.
pub fn extract_verdict(text: &str) -> ParsedVerdict {
    let verdict = VERDICT_RE.captures_iter(text).last().map(|c| {
        let pass = c
            .get(1)
            .expect("verdict capture group")
            .as_str()
            .eq_ignore_ascii_case("pass");
        (pass, c.get(0).expect("whole match").start())
    });
    let flags = (
        last_flag(&MATH_QUESTION_RE, text),
        last_flag(&MISLEADING_CUE_RE, text),
        last_flag(&ANSWER_LEAK_RE, text),
    );
    if let (Some((math, m_at)), Some((cue, c_at)), Some((leak, l_at))) = flags {
        let sub = S1Flags {
            is_math_question: math,
            has_misleading_cue: cue,
            has_answer_leak: leak,
        };
        let contract_start = [Some(m_at), Some(c_at), Some(l_at), verdict.map(|v| v.1)]
            .into_iter()
            .flatten()
            .min()
            .expect("at least the flag lines matched");
        return ParsedVerdict {
            outcome: if sub.implies_pass() {
                StageOutcome::Pass
            } else {
                StageOutcome::Fail
            },
            sub_flags: Some(sub),
            parse_source: ParseSource::RuleBased,
            rationale: text[..contract_start].trim().to_string(),
        };
    }
    match verdict {
        Some((pass, at)) => ParsedVerdict {
            outcome: if pass {
                StageOutcome::Pass
            } else {
                StageOutcome::Fail
            },
            sub_flags: None,
            parse_source: ParseSource::RuleBased,
            rationale: text[..at].trim().to_string(),
        },
        None => ParsedVerdict::invalid(),
    }
}

/// Parse `CONDITION:` / `GOAL:` lines into a decomposition, preserving
/// order of appearance. Zero goals is a parse failure; zero conditions is
/// legitimate (some questions state none).
pub fn parse_decomposition(text: &str) -> Result<Decomposition, StageError> {
    let collect = |re: &Regex| -> Vec<String> {
        re.captures_iter(text)
            .filter_map(|c| {
                let item = c.get(1).expect("list capture group").as_str().trim();
                (!item.is_empty()).then(|| item.to_string())
            })
            .collect()
    };
    let conditions = collect(&CONDITION_RE);
    let goals = collect(&GOAL_RE);
    if goals.is_empty() {
        let preview: String = text.chars().take(160).collect();
        return Err(StageError::Decomposition {
            message: format!("no GOAL line found in decomposition output: {preview:?}"),
        });
    }
    Decomposition::new(conditions, goals).map_err(|e| StageError::Decomposition {
        message: e.to_string(),
    })
}
