//! Synthetic transcript/note pairs with planted claims of known tier.
//!
//! Templates are text files with three parts: slot declarations, transcript
//! turns, and planted claims. Slots are filled by seeded random draws from
//! the knowledge base; draws that violate the structural constraints of the
//! planted tiers are redrawn.
//!
//! ```text
//! #format-version: 1
//! #template: example
//! #slots
//! concept s1 Symptom                       # a stated concept
//! drug m1                                  # a drug with trade names
//! rule r1 DiagnosticInference Symptom      # rule kind, optional antecedent types
//! absent z1 Diagnosis                      # never stated, never derivable
//! denied x1 Symptom                        # stated only under negation
//! #turns
//! Patient: I have had {s1} for about two weeks.
//! Patient: I take {m1:trade} every morning. Lately {r1:antecedents}.
//! Patient: No {x1} though.
//! #claims
//! Subjective T1: {s1} for about two weeks
//! Subjective T2a: Reports {s1:alt}
//! Subjective T2b: Patient takes {m1:generic}
//! Assessment T3: {r1:then}
//! Assessment T4: {z1}
//! Subjective T5: Reports {x1}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{mentions_in, ExtractorConfig};
use crate::kb::{ConceptRef, KnowledgeBase, RuleKind, SemanticType};
use crate::model::{
    check_format_version, parse_soap_note, parse_transcript, Label, ModelError, SectionLabel,
    SoapNote, Speaker, Tier, Transcript, FORMAT_MAJOR,
};
use crate::report::NoteReport;
use crate::text::{self, fold, is_stopword, surface_key};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("template {template}: slot {slot} cannot be filled from the knowledge base")]
    UnfillableSlot { template: String, slot: String },
    #[error("template {template} line {line}: {reason}")]
    Template {
        template: String,
        line: usize,
        reason: String,
    },
    #[error("unknown preset {0:?} (available: paper-like, balanced)")]
    UnknownPreset(String),
    #[error("{path}: {reason}")]
    Corpus { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Concept(SemanticType),
    Drug,
    Rule {
        kind: RuleKind,
        antecedent_types: Vec<SemanticType>,
    },
    Absent(SemanticType),
    Denied(SemanticType),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub kind: SlotKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimTemplate {
    pub section: SectionLabel,
    pub tier: Tier,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseTemplate {
    pub template_id: String,
    pub specialty: Option<String>,
    pub slots: Vec<SlotDef>,
    pub base_turns: Vec<(Speaker, String)>,
    pub planted_claims: Vec<ClaimTemplate>,
}

/// A `{slot}` or `{slot:variant}` marker.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Marker {
    slot: String,
    variant: Option<String>,
}

fn markers(text: &str) -> Result<Vec<(std::ops::Range<usize>, Marker)>, String> {
    let mut out = Vec::new();
    let mut rest = 0;
    while let Some(open) = text[rest..].find('{') {
        let start = rest + open;
        let close = text[start..]
            .find('}')
            .ok_or_else(|| format!("unclosed marker at byte {start}"))?
            + start;
        let inner = &text[start + 1..close];
        let (slot, variant) = match inner.split_once(':') {
            Some((s, v)) => (s.trim(), Some(v.trim().to_string())),
            None => (inner.trim(), None),
        };
        if slot.is_empty() {
            return Err("empty marker".into());
        }
        out.push((
            start..close + 1,
            Marker {
                slot: slot.to_string(),
                variant,
            },
        ));
        rest = close + 1;
    }
    Ok(out)
}

fn variant_allowed(kind: &SlotKind, variant: Option<&str>) -> bool {
    matches!(
        (kind, variant),
        (SlotKind::Concept(_), None | Some("alt"))
            | (SlotKind::Absent(_) | SlotKind::Denied(_), None)
            | (SlotKind::Drug, None | Some("trade") | Some("generic"))
            | (SlotKind::Rule { .. }, Some("antecedents") | Some("then"))
    )
}

impl CaseTemplate {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        #[derive(PartialEq)]
        enum Part {
            Header,
            Slots,
            Turns,
            Claims,
        }
        let mut id = None;
        let mut specialty = None;
        let mut version = None;
        let mut slots = Vec::new();
        let mut turns = Vec::new();
        let mut claims = Vec::new();
        let mut part = Part::Header;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split(" #").next().unwrap_or("").trim();
            let current = id.clone().unwrap_or_else(|| "<unnamed>".to_string());
            let err = |reason: String| SynthError::Template {
                template: current.clone(),
                line: line_no,
                reason,
            };
            if line.is_empty() {
                continue;
            }
            match line {
                "#slots" => {
                    part = Part::Slots;
                    continue;
                }
                "#turns" => {
                    part = Part::Turns;
                    continue;
                }
                "#claims" => {
                    part = Part::Claims;
                    continue;
                }
                _ => {}
            }
            if let Some(rest) = line.strip_prefix('#') {
                let Some((k, v)) = rest.split_once(':') else {
                    continue;
                };
                match k.trim() {
                    "format-version" => {
                        check_format_version(v.trim())?;
                        version = Some(());
                    }
                    "template" => id = Some(v.trim().to_string()),
                    "specialty" => specialty = Some(v.trim().to_string()),
                    _ => {}
                }
                continue;
            }
            match part {
                Part::Header => return Err(err("content before #slots/#turns/#claims".into())),
                Part::Slots => {
                    let cols: Vec<&str> = line.split_whitespace().collect();
                    let ty = |s: Option<&&str>| -> Result<SemanticType, SynthError> {
                        let s = s.ok_or_else(|| err("missing semantic type".into()))?;
                        SemanticType::from_str(s).map_err(|_| err(format!("unknown semantic type {s}")))
                    };
                    let name = cols.get(1).ok_or_else(|| err("missing slot name".into()))?.to_string();
                    let kind = match cols[0] {
                        "concept" => SlotKind::Concept(ty(cols.get(2))?),
                        "absent" => SlotKind::Absent(ty(cols.get(2))?),
                        "denied" => SlotKind::Denied(ty(cols.get(2))?),
                        "drug" => SlotKind::Drug,
                        "rule" => {
                            let kind_s = cols.get(2).ok_or_else(|| err("missing rule kind".into()))?;
                            let kind = RuleKind::from_str(kind_s)
                                .map_err(|_| err(format!("unknown rule kind {kind_s}")))?;
                            let antecedent_types = cols[3..]
                                .iter()
                                .map(|s| ty(Some(s)))
                                .collect::<Result<_, _>>()?;
                            SlotKind::Rule {
                                kind,
                                antecedent_types,
                            }
                        }
                        other => return Err(err(format!("unknown slot kind {other}"))),
                    };
                    if slots.iter().any(|s: &SlotDef| s.name == name) {
                        return Err(err(format!("duplicate slot {name}")));
                    }
                    slots.push(SlotDef { name, kind });
                }
                Part::Turns => {
                    let (speaker, body) = line
                        .split_once(':')
                        .ok_or_else(|| err("expected Speaker: text".into()))?;
                    let speaker = Speaker::from_str(speaker.trim())
                        .map_err(|_| err(format!("unknown speaker {speaker}")))?;
                    turns.push((speaker, body.trim().to_string()));
                }
                Part::Claims => {
                    let (head, body) = line
                        .split_once(':')
                        .ok_or_else(|| err("expected Section Tier: text".into()))?;
                    let mut head = head.split_whitespace();
                    let (Some(section), Some(tier), None) = (head.next(), head.next(), head.next())
                    else {
                        return Err(err("expected Section Tier before ':'".into()));
                    };
                    claims.push(ClaimTemplate {
                        section: section.parse().map_err(|_| err(format!("unknown section {section}")))?,
                        tier: tier.parse().map_err(|_| err(format!("unknown tier {tier}")))?,
                        text: body.trim().to_string(),
                    });
                }
            }
        }
        let template_id = id.ok_or_else(|| SynthError::Template {
            template: "<unnamed>".into(),
            line: 1,
            reason: "missing #template header".into(),
        })?;
        if version.is_none() {
            return Err(SynthError::Template {
                template: template_id,
                line: 1,
                reason: "missing #format-version header".into(),
            });
        }
        let t = CaseTemplate {
            template_id,
            specialty,
            slots,
            base_turns: turns,
            planted_claims: claims,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let err = |reason: String| SynthError::Template {
            template: self.template_id.clone(),
            line: 0,
            reason,
        };
        if self.base_turns.is_empty() {
            return Err(err("no turns".into()));
        }
        let texts = self
            .base_turns
            .iter()
            .map(|(_, t)| t)
            .chain(self.planted_claims.iter().map(|c| &c.text));
        for t in texts {
            for (_, m) in markers(t).map_err(err)? {
                let slot = self
                    .slots
                    .iter()
                    .find(|s| s.name == m.slot)
                    .ok_or_else(|| err(format!("marker references unknown slot {}", m.slot)))?;
                if !variant_allowed(&slot.kind, m.variant.as_deref()) {
                    return Err(err(format!(
                        "marker {{{}:{}}} is not valid for this slot kind",
                        m.slot,
                        m.variant.as_deref().unwrap_or("")
                    )));
                }
            }
        }
        Ok(())
    }

    fn uses_alt(&self, slot: &str) -> bool {
        self.base_turns
            .iter()
            .map(|(_, t)| t)
            .chain(self.planted_claims.iter().map(|c| &c.text))
            .flat_map(|t| markers(t).unwrap_or_default())
            .any(|(_, m)| m.slot == slot && m.variant.as_deref() == Some("alt"))
    }
}

/// A generated case with its planted truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCase {
    pub template_id: String,
    pub transcript: Transcript,
    pub note: SoapNote,
    pub truth: Vec<PlantedClaim>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedClaim {
    pub section: SectionLabel,
    pub text: String,
    pub tier: Tier,
}

#[derive(Debug, Clone)]
enum Filled {
    Concept {
        concept: ConceptRef,
        alt: Option<String>,
    },
    Drug {
        generic: ConceptRef,
        trade: String,
    },
    Rule {
        antecedents: Vec<ConceptRef>,
        then: ConceptRef,
    },
}

impl Filled {
    fn render(&self, variant: Option<&str>) -> String {
        match (self, variant) {
            (Filled::Concept { alt: Some(a), .. }, Some("alt")) => a.clone(),
            (Filled::Concept { concept, .. }, _) => concept.preferred_term.clone(),
            (Filled::Drug { trade, .. }, Some("trade")) => trade.clone(),
            (Filled::Drug { generic, .. }, _) => generic.preferred_term.clone(),
            (Filled::Rule { antecedents, .. }, Some("antecedents")) => antecedents
                .iter()
                .map(|a| a.preferred_term.as_str())
                .collect::<Vec<_>>()
                .join(" and "),
            (Filled::Rule { then, .. }, _) => then.preferred_term.clone(),
        }
    }

    /// The concept a marker of this slot stands for in a claim.
    fn claimed(&self, variant: Option<&str>) -> Option<&ConceptRef> {
        match (self, variant) {
            (Filled::Concept { concept, .. }, _) => Some(concept),
            (Filled::Drug { generic, .. }, _) => Some(generic),
            (Filled::Rule { then, .. }, Some("then")) => Some(then),
            (Filled::Rule { .. }, _) => None,
        }
    }

    fn concepts(&self) -> Vec<&ConceptRef> {
        match self {
            Filled::Concept { concept, .. } => vec![concept],
            Filled::Drug { generic, .. } => vec![generic],
            Filled::Rule { antecedents, then } => antecedents.iter().chain([then]).collect(),
        }
    }
}

const MAX_DRAWS: usize = 400;

/// Words that would change how a surface is read in context.
const RESERVED_WORDS: &[&str] = &[
    "aunt", "brother", "but", "dad", "daughter", "denies", "family", "father", "history", "however",
    "mother", "never", "no", "none", "not", "sister", "son", "though", "uncle", "without",
];

fn plain_surface(s: &str) -> bool {
    text::words(s).iter().all(|w| !RESERVED_WORDS.contains(&w.as_str()))
}

fn content_words(s: &str) -> BTreeSet<String> {
    text::words(s)
        .into_iter()
        .filter(|w| !is_stopword(w))
        .map(|w| fold(&w))
        .collect()
}

struct Pools<'a> {
    kb: &'a KnowledgeBase,
}

impl Pools<'_> {
    fn concepts(&self, ty: SemanticType, need_alt: bool, allow_consequent: bool) -> Vec<(ConceptRef, Vec<String>)> {
        self.kb
            .concepts()
            .iter()
            .filter(|c| c.semantic_type == ty && c.slot.is_none())
            .filter(|c| allow_consequent || !self.kb.is_consequent(c.id()))
            .filter(|c| plain_surface(&c.reference.preferred_term))
            .filter_map(|c| {
                let pref = surface_key(&c.reference.preferred_term);
                let alts: Vec<String> = c
                    .synonyms
                    .iter()
                    .filter(|s| surface_key(s) != pref && plain_surface(s))
                    .filter(|s| content_words(s) != content_words(&pref))
                    .cloned()
                    .collect();
                (!need_alt || !alts.is_empty()).then(|| (c.reference.clone(), alts))
            })
            .collect()
    }
}

fn draw(
    template: &CaseTemplate,
    kb: &KnowledgeBase,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, Filled>, SynthError> {
    let pools = Pools { kb };
    let unfillable = |slot: &str| SynthError::UnfillableSlot {
        template: template.template_id.clone(),
        slot: slot.to_string(),
    };
    let mut out = BTreeMap::new();
    for slot in &template.slots {
        let filled = match &slot.kind {
            SlotKind::Concept(ty) | SlotKind::Absent(ty) | SlotKind::Denied(ty) => {
                let need_alt = matches!(slot.kind, SlotKind::Concept(_)) && template.uses_alt(&slot.name);
                let pool = pools.concepts(*ty, need_alt, false);
                let (concept, alts) = pool.choose(rng).ok_or_else(|| unfillable(&slot.name))?;
                Filled::Concept {
                    concept: concept.clone(),
                    alt: alts.choose(rng).cloned(),
                }
            }
            SlotKind::Drug => {
                let pool: Vec<_> = kb
                    .drug_equivalences()
                    .iter()
                    .filter(|d| plain_surface(&d.generic.preferred_term))
                    .collect();
                let d = pool.choose(rng).ok_or_else(|| unfillable(&slot.name))?;
                let trades: Vec<&String> = d.trade_names.iter().collect();
                Filled::Drug {
                    generic: d.generic.clone(),
                    trade: trades.choose(rng).map(|s| s.to_string()).ok_or_else(|| unfillable(&slot.name))?,
                }
            }
            SlotKind::Rule {
                kind,
                antecedent_types,
            } => {
                let type_of = |c: &ConceptRef| kb.concept(&c.concept_id).map(|k| k.semantic_type);
                let pool: Vec<_> = kb
                    .rules()
                    .iter()
                    .filter(|r| r.kind == *kind)
                    .filter(|r| {
                        antecedent_types.is_empty()
                            || r.antecedents
                                .iter()
                                .all(|a| type_of(a).is_some_and(|t| antecedent_types.contains(&t)))
                    })
                    .filter(|r| {
                        kb.concept(&r.consequent.concept_id)
                            .is_some_and(|c| c.slot.is_none())
                    })
                    .filter(|r| {
                        r.antecedents
                            .iter()
                            .chain([&r.consequent])
                            .all(|a| plain_surface(&a.preferred_term))
                    })
                    .collect();
                let rule = pool.choose(rng).ok_or_else(|| unfillable(&slot.name))?;
                let mut antecedents = rule.antecedents.clone();
                antecedents.shuffle(rng);
                antecedents.truncate(rule.min_match);
                Filled::Rule {
                    antecedents,
                    then: rule.consequent.clone(),
                }
            }
        };
        out.insert(slot.name.clone(), filled);
    }
    Ok(out)
}

fn render(text: &str, fills: &BTreeMap<String, Filled>) -> String {
    let mut out = String::new();
    let mut last = 0;
    for (range, m) in markers(text).expect("validated template") {
        out.push_str(&text[last..range.start]);
        out.push_str(&fills[&m.slot].render(m.variant.as_deref()));
        last = range.end;
    }
    out.push_str(&text[last..]);
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Checks the structural guarantees each planted tier relies on. Returns the
/// slot responsible for the first violation.
fn check_constraints(
    template: &CaseTemplate,
    fills: &BTreeMap<String, Filled>,
    turns: &[String],
    claims: &[String],
    kb: &KnowledgeBase,
) -> Result<(), String> {
    let cfg = ExtractorConfig::default();
    let slot_kind = |name: &str| &template.slots.iter().find(|s| s.name == name).expect("slot").kind;

    // Distinct concepts across all slots.
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, f) in fills {
        for c in f.concepts() {
            if seen.insert(c.concept_id.as_str(), name.as_str()).is_some() {
                return Err(name.clone());
            }
        }
    }

    // Mentions per transcript statement (questions excluded: they ground nothing).
    let turn_mentions: Vec<Vec<crate::model::Mention>> = turns
        .iter()
        .map(|t| {
            text::split_sentences(t)
                .iter()
                .flat_map(|s| mentions_in(s, kb, &cfg))
                .collect()
        })
        .collect();
    let statement_mentions: Vec<crate::model::Mention> = turns
        .iter()
        .flat_map(|t| text::split_sentences(t))
        .filter(|s| !s.trim_end().ends_with('?'))
        .flat_map(|s| mentions_in(&s, kb, &cfg))
        .collect();
    let stated = |id: &str| statement_mentions.iter().any(|m| !m.negated && m.concept.concept_id == id);
    let anywhere = |id: &str| turn_mentions.iter().flatten().any(|m| m.concept.concept_id == id);

    let denied_turns: BTreeSet<usize> = template
        .base_turns
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| {
            markers(t)
                .unwrap_or_default()
                .iter()
                .any(|(_, m)| matches!(slot_kind(&m.slot), SlotKind::Denied(_)))
        })
        .map(|(i, _)| i)
        .collect();

    for slot in &template.slots {
        let f = &fills[&slot.name];
        let ok = match (&slot.kind, f) {
            (SlotKind::Concept(_), Filled::Concept { concept, .. }) => stated(&concept.concept_id),
            (SlotKind::Drug, Filled::Drug { generic, .. }) => stated(&generic.concept_id),
            (SlotKind::Rule { .. }, Filled::Rule { antecedents, then }) => {
                antecedents.iter().all(|a| stated(&a.concept_id)) && !anywhere(&then.concept_id)
            }
            (SlotKind::Absent(_), Filled::Concept { concept, .. }) => !anywhere(&concept.concept_id),
            (SlotKind::Denied(_), Filled::Concept { concept, .. }) => {
                let id = concept.concept_id.as_str();
                let ms: Vec<_> = statement_mentions.iter().filter(|m| m.concept.concept_id == id).collect();
                !ms.is_empty() && ms.iter().all(|m| m.negated)
            }
            _ => false,
        };
        if !ok {
            return Err(slot.name.clone());
        }
    }

    // Planted claims: each names its slot concepts, and non-T1 claims must
    // not be restatable from any turn plus the turn before it.
    let window_words: Vec<(usize, BTreeSet<String>)> = (0..turns.len())
        .map(|i| {
            let mut w = content_words(&turns[i]);
            if i > 0 {
                w.extend(content_words(&turns[i - 1]));
            }
            (i, w)
        })
        .collect();
    for (ct, rendered) in template.planted_claims.iter().zip(claims) {
        let ms = mentions_in(rendered, kb, &cfg);
        for (_, m) in markers(&ct.text).expect("validated template") {
            if let Some(c) = fills[&m.slot].claimed(m.variant.as_deref()) {
                if !ms.iter().any(|x| !x.negated && x.concept == *c) {
                    return Err(m.slot);
                }
            }
        }
        if ct.tier == Tier::T1Direct {
            continue;
        }
        let words = content_words(rendered);
        let restatable = window_words.iter().any(|(i, w)| {
            let excluded = ct.tier == Tier::T5Contradiction
                && (denied_turns.contains(i) || (*i > 0 && denied_turns.contains(&(i - 1))));
            !excluded && !words.is_empty() && words.is_subset(w)
        });
        if restatable {
            let slot = markers(&ct.text)
                .ok()
                .and_then(|ms| ms.into_iter().next().map(|(_, m)| m.slot))
                .unwrap_or_else(|| "<claim text>".into());
            return Err(slot);
        }
    }
    let distinct: BTreeSet<String> = claims.iter().map(|c| surface_key(c)).collect();
    if distinct.len() != claims.len() {
        return Err("<claim text>".into());
    }
    Ok(())
}

/// Deterministic in (template, kb, seed).
pub fn generate_case(template: &CaseTemplate, kb: &KnowledgeBase, seed: u64) -> Result<GroundTruthCase, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_failure = String::new();
    for _ in 0..MAX_DRAWS {
        let fills = draw(template, kb, &mut rng)?;
        let turns: Vec<String> = template.base_turns.iter().map(|(_, t)| render(t, &fills)).collect();
        let claims: Vec<String> = template
            .planted_claims
            .iter()
            .map(|c| capitalize(&text::trim_terminal(&render(&c.text, &fills))))
            .collect();
        if let Err(slot) = check_constraints(template, &fills, &turns, &claims, kb) {
            last_failure = slot;
            continue;
        }
        let id = format!("{}-{seed:016x}", template.template_id);
        let transcript = Transcript::new(
            id.clone(),
            template
                .base_turns
                .iter()
                .zip(turns)
                .map(|((speaker, _), t)| (*speaker, t)),
            template.specialty.clone(),
        )?;
        let truth: Vec<PlantedClaim> = template
            .planted_claims
            .iter()
            .zip(claims)
            .map(|(ct, text)| PlantedClaim {
                section: ct.section,
                text,
                tier: ct.tier,
            })
            .collect();
        let note = SoapNote::new(
            id,
            SectionLabel::ALL.map(|label| {
                let body = truth
                    .iter()
                    .filter(|c| c.section == label)
                    .map(|c| format!("{}.", c.text))
                    .collect::<Vec<_>>()
                    .join(" ");
                (label, body)
            }),
        )?;
        return Ok(GroundTruthCase {
            template_id: template.template_id.clone(),
            transcript,
            note,
            truth,
            seed,
        });
    }
    Err(SynthError::UnfillableSlot {
        template: template.template_id.clone(),
        slot: last_failure,
    })
}

const PAPER_LIKE: &[&str] = &[
    include_str!("../data/templates/paper-like/intake.tmpl"),
    include_str!("../data/templates/paper-like/followup.tmpl"),
    include_str!("../data/templates/paper-like/acute.tmpl"),
    include_str!("../data/templates/paper-like/medication.tmpl"),
];
const BALANCED: &[&str] = &[include_str!("../data/templates/balanced/mixed.tmpl")];

pub const PRESETS: &[&str] = &["paper-like", "balanced"];

/// Built-in template set. "paper-like" is calibrated so the strict and
/// inference-aware rates land near the published gap; "balanced" plants the
/// 40/15/5/15/15/10 tier mix.
pub fn preset(name: &str) -> Result<Vec<CaseTemplate>, SynthError> {
    let sources = match name {
        "paper-like" => PAPER_LIKE,
        "balanced" => BALANCED,
        other => return Err(SynthError::UnknownPreset(other.to_string())),
    };
    sources.iter().map(|s| CaseTemplate::parse(s)).collect()
}

/// Loads every `*.tmpl` file in a directory, in file-name order.
pub fn load_templates(dir: &Path) -> Result<Vec<CaseTemplate>, SynthError> {
    let io = |e: std::io::Error| SynthError::Corpus {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tmpl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| CaseTemplate::parse(&fs::read_to_string(p).map_err(io)?))
        .collect()
}

/// `n` cases; templates and per-case seeds are drawn from `seed`.
pub fn generate_corpus(
    templates: &[CaseTemplate],
    kb: &KnowledgeBase,
    n: usize,
    seed: u64,
) -> Result<Vec<GroundTruthCase>, SynthError> {
    if templates.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(usize, u64)> = (0..n)
        .map(|_| (rng.gen_range(0..templates.len()), rng.gen()))
        .collect();
    plan.into_par_iter()
        .map(|(t, s)| generate_case(&templates[t], kb, s))
        .collect()
}

/// Expected (Stage 1, Stage 2) mean rates from planted tiers, macro-averaged.
pub fn oracle_rates(corpus: &[GroundTruthCase]) -> (f64, f64) {
    if corpus.is_empty() {
        return (0.0, 0.0);
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for case in corpus {
        let n = case.truth.len();
        if n == 0 {
            continue;
        }
        let flagged1 = case.truth.iter().filter(|c| c.tier != Tier::T1Direct).count();
        let flagged2 = case.truth.iter().filter(|c| c.tier.label() == Label::Hallucinated).count();
        s1 += flagged1 as f64 / n as f64;
        s2 += flagged2 as f64 / n as f64;
    }
    (s1 / corpus.len() as f64, s2 / corpus.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierMismatch {
    pub case_id: String,
    pub claim_text: String,
    pub planted: Tier,
    pub judged: Option<Tier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Soundness {
    pub total: usize,
    pub exact: usize,
    pub mismatches: Vec<TierMismatch>,
}

impl Soundness {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.exact as f64 / self.total as f64
        }
    }
}

/// Compares judged tiers to planted tiers, matching claims by section and
/// text. A planted claim with no matching judged claim counts as a miss.
pub fn tier_soundness(corpus: &[GroundTruthCase], reports: &[NoteReport]) -> Soundness {
    let by_note: BTreeMap<&str, &NoteReport> = reports.iter().map(|r| (r.note_id.as_str(), r)).collect();
    let mut out = Soundness {
        total: 0,
        exact: 0,
        mismatches: Vec::new(),
    };
    for case in corpus {
        let report = by_note.get(case.note.id.as_str());
        for planted in &case.truth {
            out.total += 1;
            let judged = report.and_then(|r| {
                r.claims
                    .iter()
                    .zip(&r.verdicts)
                    .find(|(c, _)| c.section == planted.section && c.text == planted.text)
                    .map(|(_, v)| v.tier)
            });
            if judged == Some(planted.tier) {
                out.exact += 1;
            } else {
                out.mismatches.push(TierMismatch {
                    case_id: case.note.id.clone(),
                    claim_text: planted.text.clone(),
                    planted: planted.tier,
                    judged,
                });
            }
        }
    }
    out
}

// ---- corpus directories ----

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRUTH_FILE: &str = "truth.tsv";
pub const ORACLE_FILE: &str = "oracle.tsv";

/// A transcript/note pair listed in a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub case_id: String,
    pub transcript: Transcript,
    pub note: SoapNote,
}

fn corpus_io(path: &Path) -> impl Fn(std::io::Error) -> SynthError + '_ {
    move |e| SynthError::Corpus {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes `cases/<id>.transcript`, `cases/<id>.soap`, the manifest, the
/// truth table and the oracle rates.
pub fn write_corpus(dir: &Path, corpus: &[GroundTruthCase], preset: &str, seed: u64) -> Result<(), SynthError> {
    let cases = dir.join("cases");
    fs::create_dir_all(&cases).map_err(corpus_io(&cases))?;
    let mut manifest = format!(
        "#format-version: {FORMAT_MAJOR}\n#preset: {preset}\n#seed: {seed}\ncase_id\ttemplate\tcase_seed\ttranscript\tnote\n"
    );
    let mut truth = format!("#format-version: {FORMAT_MAJOR}\ncase_id\tsection\ttier\tclaim_text\n");
    for case in corpus {
        let id = &case.note.id;
        let tpath = format!("cases/{id}.transcript");
        let npath = format!("cases/{id}.soap");
        fs::write(dir.join(&tpath), case.transcript.to_text()).map_err(corpus_io(dir))?;
        fs::write(dir.join(&npath), case.note.to_text()).map_err(corpus_io(dir))?;
        let _ = writeln!(manifest, "{id}\t{}\t{}\t{tpath}\t{npath}", case.template_id, case.seed);
        for c in &case.truth {
            let _ = writeln!(truth, "{id}\t{}\t{}\t{}", c.section, c.tier, c.text);
        }
    }
    let (s1, s2) = oracle_rates(corpus);
    let oracle = format!(
        "#format-version: {FORMAT_MAJOR}\ncases\tclaims\tstage1_expected\tstage2_expected\n{}\t{}\t{s1}\t{s2}\n",
        corpus.len(),
        corpus.iter().map(|c| c.truth.len()).sum::<usize>()
    );
    for (name, body) in [(MANIFEST_FILE, manifest), (TRUTH_FILE, truth), (ORACLE_FILE, oracle)] {
        fs::write(dir.join(name), body).map_err(corpus_io(dir))?;
    }
    Ok(())
}

fn data_rows(text: &str, path: &Path) -> Result<Vec<Vec<String>>, SynthError> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("#format-version:") {
            check_format_version(v.trim())?;
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        rows.push(line.split('\t').map(str::to_string).collect());
    }
    if !header_seen {
        return Err(SynthError::Corpus {
            path: path.to_path_buf(),
            reason: "missing header row".into(),
        });
    }
    Ok(rows)
}

/// Reads the transcript/note pairs listed in a corpus manifest.
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusEntry>, SynthError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(corpus_io(&path))?;
    data_rows(&text, &path)?
        .into_iter()
        .map(|cols| {
            let [case_id, _, _, tpath, npath] = &cols[..] else {
                return Err(SynthError::Corpus {
                    path: path.clone(),
                    reason: format!("expected 5 columns, found {}", cols.len()),
                });
            };
            let read = |p: &str| {
                let full = dir.join(p);
                fs::read_to_string(&full).map_err(|e| SynthError::Corpus {
                    path: full.clone(),
                    reason: e.to_string(),
                })
            };
            Ok(CorpusEntry {
                case_id: case_id.clone(),
                transcript: parse_transcript(&read(tpath)?, case_id)?,
                note: parse_soap_note(&read(npath)?, case_id)?,
            })
        })
        .collect()
}

/// Reads a corpus back with its planted truth.
pub fn read_ground_truth(dir: &Path) -> Result<Vec<GroundTruthCase>, SynthError> {
    let entries = read_corpus(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = data_rows(&fs::read_to_string(&manifest_path).map_err(corpus_io(&manifest_path))?, &manifest_path)?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth_rows = data_rows(&fs::read_to_string(&truth_path).map_err(corpus_io(&truth_path))?, &truth_path)?;
    let bad = |reason: String| SynthError::Corpus {
        path: truth_path.clone(),
        reason,
    };
    let mut truth: BTreeMap<String, Vec<PlantedClaim>> = BTreeMap::new();
    for cols in truth_rows {
        let [id, section, tier, text] = &cols[..] else {
            return Err(bad(format!("expected 4 columns, found {}", cols.len())));
        };
        truth.entry(id.clone()).or_default().push(PlantedClaim {
            section: section.parse().map_err(|_| bad(format!("unknown section {section}")))?,
            tier: tier.parse().map_err(|_| bad(format!("unknown tier {tier}")))?,
            text: text.clone(),
        });
    }
    Ok(entries
        .into_iter()
        .zip(manifest)
        .map(|(e, cols)| GroundTruthCase {
            template_id: cols.get(1).cloned().unwrap_or_default(),
            seed: cols.get(2).and_then(|s| s.parse().ok()).unwrap_or(0),
            truth: truth.remove(&e.case_id).unwrap_or_default(),
            transcript: e.transcript,
            note: e.note,
        })
        .collect())
}
