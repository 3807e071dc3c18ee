//! Domain types shared by every stage of the pipeline, plus the transcript
//! and SOAP note text formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ConceptRef, RuleKind, SurfaceKind};

/// Major version written into, and required from, every exchange format.
pub const FORMAT_MAJOR: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed document at line {line}: {reason}")]
    MalformedDocument { line: usize, reason: String },
    #[error("missing section {0}")]
    MissingSection(SectionLabel),
    #[error("unsupported format version {0:?} (this build reads major version {FORMAT_MAJOR})")]
    UnsupportedVersion(String),
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error("invalid verdict for {claim_id}: {reason}")]
    InvalidVerdict { claim_id: String, reason: String },
    #[error("duplicate fact id {0}")]
    DuplicateFactId(String),
}

/// Checks a `format-version` header value against [`FORMAT_MAJOR`].
pub fn check_format_version(value: &str) -> Result<(), ModelError> {
    let major = value.trim().split('.').next().unwrap_or("");
    match major.parse::<u32>() {
        Ok(FORMAT_MAJOR) => Ok(()),
        _ => Err(ModelError::UnsupportedVersion(value.trim().to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    Doctor,
    Patient,
}

impl FromStr for Speaker {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "doctor" => Ok(Speaker::Doctor),
            "patient" => Ok(Speaker::Patient),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Doctor => "Doctor",
            Speaker::Patient => "Patient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
}

impl Transcript {
    /// Builds a transcript from (speaker, text) pairs, assigning contiguous
    /// indices.
    pub fn new(
        id: impl Into<String>,
        turns: impl IntoIterator<Item = (Speaker, String)>,
        specialty: Option<String>,
    ) -> Result<Self, ModelError> {
        let turns = turns
            .into_iter()
            .enumerate()
            .map(|(index, (speaker, text))| Turn {
                index,
                speaker,
                text,
            })
            .collect();
        let t = Transcript {
            id: id.into(),
            turns,
            specialty,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.turns.is_empty() {
            return Err(ModelError::InvalidTranscript("no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i {
                return Err(ModelError::InvalidTranscript(format!(
                    "turn indices not contiguous at position {i}"
                )));
            }
            if turn.text.trim().is_empty() {
                return Err(ModelError::InvalidTranscript(format!("turn {i} has empty text")));
            }
            if turn.text.contains('\n') || turn.text.trim() != turn.text {
                return Err(ModelError::InvalidTranscript(format!(
                    "turn {i} text must be a single trimmed line"
                )));
            }
        }
        Ok(())
    }

    /// Renders the one-turn-per-line text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("#format-version: {FORMAT_MAJOR}\n#id: {}\n", self.id);
        if let Some(s) = &self.specialty {
            out.push_str(&format!("#specialty: {s}\n"));
        }
        for turn in &self.turns {
            out.push_str(&format!("{}: {}\n", turn.speaker, turn.text));
        }
        out
    }
}

/// Metadata lines (`#key: value`) at the top of a text document.
fn header_value(line: &str) -> Option<(String, String)> {
    let rest = line.strip_prefix('#')?;
    let (k, v) = rest.split_once(':')?;
    Some((k.trim().to_ascii_lowercase(), v.trim().to_string()))
}

/// Parses the transcript text format: optional `#key: value` headers, then
/// one `Speaker: text` turn per line. Blank lines are ignored.
pub fn parse_transcript(raw: &str, fallback_id: &str) -> Result<Transcript, ModelError> {
    let mut id = fallback_id.to_string();
    let mut specialty = None;
    let mut turns = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            match header_value(line) {
                Some((k, v)) if k == "format-version" => check_format_version(&v)?,
                Some((k, v)) if k == "id" => id = v,
                Some((k, v)) if k == "specialty" => specialty = Some(v),
                _ => {}
            }
            continue;
        }
        let malformed = |reason: &str| ModelError::MalformedDocument {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let (tag, text) = line
            .split_once(':')
            .ok_or_else(|| malformed("missing speaker tag"))?;
        let speaker = tag
            .parse::<Speaker>()
            .map_err(|_| malformed(&format!("unknown speaker {:?}", tag.trim())))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(malformed("empty turn text"));
        }
        turns.push((speaker, text.to_string()));
    }
    if turns.is_empty() {
        return Err(ModelError::MalformedDocument {
            line: 0,
            reason: "document contains no turns".into(),
        });
    }
    Transcript::new(id, turns, specialty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionLabel {
    Subjective,
    Objective,
    Assessment,
    Plan,
}

impl SectionLabel {
    pub const ALL: [SectionLabel; 4] = [
        SectionLabel::Subjective,
        SectionLabel::Objective,
        SectionLabel::Assessment,
        SectionLabel::Plan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionLabel::Subjective => "Subjective",
            SectionLabel::Objective => "Objective",
            SectionLabel::Assessment => "Assessment",
            SectionLabel::Plan => "Plan",
        }
    }
}

impl fmt::Display for SectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectionLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        SectionLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoapNote {
    pub id: String,
    sections: BTreeMap<SectionLabel, String>,
}

impl SoapNote {
    pub fn new(
        id: impl Into<String>,
        sections: impl IntoIterator<Item = (SectionLabel, String)>,
    ) -> Result<Self, ModelError> {
        let sections: BTreeMap<_, _> = sections.into_iter().collect();
        if let Some(missing) = SectionLabel::ALL.into_iter().find(|l| !sections.contains_key(l)) {
            return Err(ModelError::MissingSection(missing));
        }
        Ok(SoapNote {
            id: id.into(),
            sections,
        })
    }

    pub fn section(&self, label: SectionLabel) -> &str {
        self.sections.get(&label).map(String::as_str).unwrap_or("")
    }

    pub fn sections(&self) -> impl Iterator<Item = (SectionLabel, &str)> {
        self.sections.iter().map(|(k, v)| (*k, v.as_str()))
    }

    /// Renders the header-per-section text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("#format-version: {FORMAT_MAJOR}\n#id: {}\n", self.id);
        for (label, text) in self.sections() {
            out.push_str(&format!("{label}:\n"));
            if !text.is_empty() {
                out.push_str(text);
                out.push('\n');
            }
        }
        out
    }
}

fn section_header(line: &str) -> Option<(SectionLabel, &str)> {
    let (name, rest) = line.split_once(':')?;
    let label = name.parse::<SectionLabel>().ok()?;
    Some((label, rest.trim()))
}

/// Parses a SOAP note. Two layouts are accepted: the header layout (each
/// section name on its own line followed by `:`, text on the following
/// lines or the same line) and a JSON object keyed by section name.
pub fn parse_soap_note(raw: &str, fallback_id: &str) -> Result<SoapNote, ModelError> {
    if raw.trim_start().starts_with('{') {
        return parse_soap_json(raw, fallback_id);
    }
    let mut id = fallback_id.to_string();
    let mut sections: BTreeMap<SectionLabel, Vec<String>> = BTreeMap::new();
    let mut current: Option<SectionLabel> = None;
    for (lineno, line) in raw.lines().enumerate() {
        let trimmed = line.trim();
        if current.is_none() && trimmed.starts_with('#') {
            match header_value(trimmed) {
                Some((k, v)) if k == "format-version" => check_format_version(&v)?,
                Some((k, v)) if k == "id" => id = v,
                _ => {}
            }
            continue;
        }
        if let Some((label, rest)) = section_header(trimmed) {
            if sections.contains_key(&label) {
                return Err(ModelError::MalformedDocument {
                    line: lineno + 1,
                    reason: format!("section {label} appears twice"),
                });
            }
            let body = sections.entry(label).or_default();
            if !rest.is_empty() {
                body.push(rest.to_string());
            }
            current = Some(label);
            continue;
        }
        match current {
            Some(label) => {
                if !trimmed.is_empty() {
                    sections.entry(label).or_default().push(trimmed.to_string());
                }
            }
            None if trimmed.is_empty() || trimmed.starts_with('#') => {}
            None => {
                return Err(ModelError::MalformedDocument {
                    line: lineno + 1,
                    reason: "text before the first section header".into(),
                })
            }
        }
    }
    SoapNote::new(
        id,
        sections.into_iter().map(|(k, v)| (k, v.join("\n"))),
    )
}

fn parse_soap_json(raw: &str, fallback_id: &str) -> Result<SoapNote, ModelError> {
    let value: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(raw).map_err(|e| ModelError::MalformedDocument {
            line: e.line(),
            reason: e.to_string(),
        })?;
    let mut id = fallback_id.to_string();
    let mut sections = Vec::new();
    for (key, v) in value {
        let malformed = |reason: String| ModelError::MalformedDocument { line: 0, reason };
        if key == "format_version" || key == "format-version" {
            let text = match &v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            check_format_version(&text)?;
            continue;
        }
        if key == "id" {
            id = v.as_str().ok_or_else(|| malformed("id must be a string".into()))?.to_string();
            continue;
        }
        let label = key
            .parse::<SectionLabel>()
            .map_err(|_| malformed(format!("unknown section key {key:?}")))?;
        let text = v
            .as_str()
            .ok_or_else(|| malformed(format!("section {key} must be a string")))?;
        sections.push((label, text.trim().to_string()));
    }
    SoapNote::new(id, sections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Asserted,
    Denied,
}

/// A knowledge-base concept found in a span of text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub concept: ConceptRef,
    /// Surface key that matched.
    pub surface: String,
    pub kind: SurfaceKind,
    pub negated: bool,
}

/// A word used for lexical grounding: plural-folded, with its negation flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LexToken {
    pub word: String,
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    /// Normalized statement, prefixed by the question topic for elliptical
    /// answers ("drug allergies: penicillin i got a rash").
    pub text: String,
    /// Source sentences as spoken, for audit display.
    pub raw: String,
    pub section: SectionLabel,
    pub source_turns: Vec<usize>,
    pub concepts: Vec<ConceptRef>,
    pub mentions: Vec<Mention>,
    pub tokens: Vec<LexToken>,
    pub polarity: Polarity,
}

impl Fact {
    pub fn mentions_concept(&self, concept_id: &str) -> bool {
        self.concepts.iter().any(|c| c.concept_id == concept_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactBase {
    pub transcript_id: String,
    pub facts: Vec<Fact>,
    /// concept id -> ids of facts mentioning it; rebuilt from `facts`.
    pub index: BTreeMap<String, Vec<String>>,
}

impl FactBase {
    pub fn new(transcript_id: impl Into<String>, facts: Vec<Fact>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for f in &facts {
            if !seen.insert(f.id.as_str()) {
                return Err(ModelError::DuplicateFactId(f.id.clone()));
            }
        }
        let index = Self::build_index(&facts);
        Ok(FactBase {
            transcript_id: transcript_id.into(),
            facts,
            index,
        })
    }

    pub fn build_index(facts: &[Fact]) -> BTreeMap<String, Vec<String>> {
        let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for f in facts {
            for c in &f.concepts {
                let ids = index.entry(c.concept_id.clone()).or_default();
                if ids.last() != Some(&f.id) {
                    ids.push(f.id.clone());
                }
            }
        }
        index
    }

    pub fn get(&self, fact_id: &str) -> Option<&Fact> {
        self.facts.iter().find(|f| f.id == fact_id)
    }

    /// Facts mentioning the concept, in fact order.
    pub fn facts_for<'a>(&'a self, concept_id: &str) -> impl Iterator<Item = &'a Fact> + 'a {
        self.index
            .get(concept_id)
            .into_iter()
            .flatten()
            .filter_map(move |id| self.get(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClaimKind {
    Symptom,
    Diagnosis,
    Medication,
    Procedure,
    History,
    Allergy,
    ExamFinding,
    PlanAction,
    SummaryStatement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub text: String,
    pub section: SectionLabel,
    pub concepts: Vec<ConceptRef>,
    pub kind: ClaimKind,
    pub mentions: Vec<Mention>,
    pub tokens: Vec<LexToken>,
}

/// Grounding tiers, strongest first. The derived order is the tier order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "T1")]
    T1Direct,
    #[serde(rename = "T2a")]
    T2aParaphrase,
    #[serde(rename = "T2b")]
    T2bDrugSynonym,
    #[serde(rename = "T3")]
    T3Inference,
    #[serde(rename = "T4")]
    T4Overreach,
    #[serde(rename = "T5")]
    T5Contradiction,
}

impl Tier {
    pub const ALL: [Tier; 6] = [
        Tier::T1Direct,
        Tier::T2aParaphrase,
        Tier::T2bDrugSynonym,
        Tier::T3Inference,
        Tier::T4Overreach,
        Tier::T5Contradiction,
    ];

    pub fn label(self) -> Label {
        match self {
            Tier::T1Direct | Tier::T2aParaphrase | Tier::T2bDrugSynonym | Tier::T3Inference => {
                Label::Supported
            }
            Tier::T4Overreach | Tier::T5Contradiction => Label::Hallucinated,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Tier::T1Direct => "T1",
            Tier::T2aParaphrase => "T2a",
            Tier::T2bDrugSynonym => "T2b",
            Tier::T3Inference => "T3",
            Tier::T4Overreach => "T4",
            Tier::T5Contradiction => "T5",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Tier {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Tier::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s.trim()))
            .ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Supported,
    Hallucinated,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Supported => "Supported",
            Label::Hallucinated => "Hallucinated",
        })
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "supported" => Ok(Label::Supported),
            "hallucinated" => Ok(Label::Hallucinated),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyId {
    Stage1Strict,
    Stage2InferenceAware,
}

impl PolicyId {
    pub fn short(self) -> &'static str {
        match self {
            PolicyId::Stage1Strict => "stage1",
            PolicyId::Stage2InferenceAware => "stage2",
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for PolicyId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stage1" | "stage1strict" => Ok(PolicyId::Stage1Strict),
            "stage2" | "stage2inferenceaware" => Ok(PolicyId::Stage2InferenceAware),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Matched,
    NotMatched,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolStep {
    pub step_number: u8,
    pub description: String,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredRule {
    pub rule_id: String,
    pub kind: RuleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim_id: String,
    pub label: Label,
    pub tier: Tier,
    pub evidence: Vec<String>,
    #[serde(default)]
    pub rules: Vec<FiredRule>,
    pub trace: Vec<ProtocolStep>,
    pub policy: PolicyId,
    pub reason: String,
}

impl Verdict {
    /// Checks the tier/label coupling, evidence and trace invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidVerdict {
            claim_id: self.claim_id.clone(),
            reason: reason.to_string(),
        };
        if self.label != self.tier.label() {
            return Err(bad("label does not match tier"));
        }
        if self.tier <= Tier::T2bDrugSynonym && self.evidence.is_empty() {
            return Err(bad("tiers 1-2b require evidence"));
        }
        if self.tier == Tier::T5Contradiction && self.evidence.is_empty() {
            return Err(bad("contradiction must name the contradicted fact"));
        }
        if self.label == Label::Hallucinated && self.reason.trim().is_empty() {
            return Err(bad("hallucinated verdict without reason"));
        }
        if self.trace.first().map(|s| s.step_number) != Some(1) {
            return Err(bad("trace must start at step 1"));
        }
        if !self.trace.windows(2).all(|w| w[0].step_number < w[1].step_number) {
            return Err(bad("trace steps not strictly increasing"));
        }
        let terminals = self
            .trace
            .iter()
            .filter(|s| s.outcome == StepOutcome::Terminal)
            .count();
        let last = self.trace.last().expect("non-empty trace");
        if terminals != 1 || last.outcome != StepOutcome::Terminal || last.step_number > 5 {
            return Err(bad("trace must end with exactly one terminal step numbered <= 5"));
        }
        Ok(())
    }
}
