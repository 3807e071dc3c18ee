//! Claim-level hallucination judging for clinical SOAP notes.
//!
//! The pipeline extracts a fact base from a physician–patient transcript and
//! a claim list from a SOAP note, then classifies every claim into a grounding
//! tier under either a strict lexical policy or an inference-aware policy
//! backed by a clinical knowledge base.

pub mod backend;
pub mod extract;
pub mod judge;
pub mod kb;
pub mod model;
pub mod report;
pub mod synth;
pub mod text;

pub use extract::{extract_claims, extract_facts, ExtractorConfig};
pub use judge::{classify_claim, judge_note, safety_floor, DeterministicJudge, PolicyConfig};
pub use kb::KnowledgeBase;
pub use model::*;
