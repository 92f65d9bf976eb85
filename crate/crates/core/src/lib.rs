//! Validity verification for natural-language math questions.
//!
//! A question is checked by a five-stage pipeline, each stage asking a
//! language model one focused yes/no question about the text: contaminated
//! instructions (S1), linguistic damage (S2), per-condition soundness (S3),
//! cross-condition contradictions (S4), and goal completeness (S5). A
//! question is valid only if every stage passes. Verdicts from several
//! models can be combined by threshold voting, and labeled datasets score
//! the whole arrangement.

pub mod config;
pub mod dataset;
pub mod domain;
pub mod ensemble;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod stages;

pub use domain::{
    ErrorCategory, FinalVerdict, GroundTruth, MathQuestion, StageId, StageOutcome,
    VerificationTrace,
};
