//! Fact extraction from transcripts and claim extraction from SOAP notes.
//!
//! The reference extractor is lexicon driven: concepts are found by greedy
//! longest match against the knowledge base surface index, negation is scoped
//! NegEx-style (a cue opens a scope that runs to the end of the sentence
//! fragment or a contrastive word), and doctor sentences are assigned a note
//! section by cue words.
//!
//! Two conversational patterns get special handling because transcripts are
//! full of them:
//! - elliptical answers ("Any drug allergies?" / "Penicillin, I got a rash")
//!   inherit the concepts of the question they answer;
//! - conditions attributed to a relative ("my dad had ulcers") become family
//!   history concepts instead of patient problems.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Endpoint};
use crate::kb::{ConceptRef, KnowledgeBase, SemanticType, SurfaceKind};
use crate::model::{
    Claim, ClaimKind, Fact, FactBase, LexToken, Mention, ModelError, Polarity, SectionLabel,
    SoapNote, Speaker, Transcript,
};
use crate::text::{self, fold, is_stopword, Piece};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("extractor config needs at least one negation cue")]
    NoNegationCues,
    #[error("external-model extraction needs an endpoint")]
    EndpointRequired,
    #[error("external extractor returned an unusable line {line}: {reason}")]
    ExternalOutput { line: usize, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorMode {
    RuleBased,
    ExternalModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentenceSplit {
    Punctuation,
    PunctuationPlusConjunctions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    pub negation_cues: Vec<String>,
    pub sentence_split: SentenceSplit,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            mode: ExtractorMode::RuleBased,
            negation_cues: ["no", "denies", "not", "without", "never"]
                .map(String::from)
                .to_vec(),
            sentence_split: SentenceSplit::Punctuation,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.negation_cues.iter().all(|c| text::words(c).is_empty()) {
            return Err(ExtractError::NoNegationCues);
        }
        Ok(())
    }

    fn cue_words(&self) -> Vec<Vec<String>> {
        self.negation_cues
            .iter()
            .map(|c| text::words(c))
            .filter(|w| !w.is_empty())
            .collect()
    }
}

/// Words that end a negation scope.
const CONTRASTIVE: &[&str] = &["although", "but", "except", "however", "though"];

/// Vocabulary of a bare denial answer ("No.", "Nothing like that.", "Nope").
const DENIAL_HEADS: &[&str] = &["nah", "never", "no", "none", "nope", "not", "nothing"];
const DENIAL_FILLER: &[&str] = &["all", "at", "like", "really", "that", "this"];

const FAMILY_CUES: &[&str] = &[
    "aunt", "brother", "dad", "daughter", "family", "father", "grandfather", "grandma",
    "grandmother", "grandpa", "mom", "mother", "mum", "parent", "parents", "sibling", "siblings",
    "sister", "son", "uncle",
];

const EXAM_CUES: &[&str] = &[
    "auscultation", "bowel", "exam", "examination", "examine", "listen", "palpate", "palpation",
    "press", "tender", "tenderness", "vitals",
];
const ASSESSMENT_CUES: &[&str] = &[
    "consistent", "diagnosis", "impression", "likely", "probably", "suspect",
];
const PLAN_CUES: &[&str] = &[
    "avoid", "check", "continue", "decrease", "eat", "follow", "increase", "monitor", "order",
    "prescribe", "prescribing", "recommend", "refer", "referral", "return", "schedule", "start",
    "stop", "take", "test", "tests", "try",
];

const ALLERGY_CUES: &[&str] = &["allergic", "allergies", "allergy"];
const HISTORY_CUES: &[&str] = &["family", "history"];

/// A sentence scanned for concepts, negation and lexical tokens.
#[derive(Debug, Clone)]
struct Analysis {
    words: Vec<String>,
    /// Word i is preceded by a comma or colon (soft boundary).
    soft_before: Vec<bool>,
    negated: Vec<bool>,
    cue_start: Vec<bool>,
    is_cue: Vec<bool>,
    contrastive: Vec<bool>,
    mentions: Vec<(usize, usize, Mention)>,
}

impl Analysis {
    fn tokens(&self, range: std::ops::Range<usize>) -> Vec<LexToken> {
        range
            .filter(|&i| {
                let w = &self.words[i];
                !self.is_cue[i] && !self.contrastive[i] && !is_stopword(w)
            })
            .map(|i| LexToken {
                word: fold(&self.words[i]),
                negated: self.negated[i],
            })
            .collect()
    }

    fn has_family_cue(&self) -> bool {
        let inside = self.inside_mention();
        self.words
            .iter()
            .enumerate()
            .any(|(i, w)| !inside[i] && FAMILY_CUES.contains(&w.as_str()))
    }

    fn inside_mention(&self) -> Vec<bool> {
        let mut inside = vec![false; self.words.len()];
        for (s, e, _) in &self.mentions {
            inside[*s..*e].iter_mut().for_each(|x| *x = true);
        }
        inside
    }
}

fn analyze(sentence: &str, kb: &KnowledgeBase, cues: &[Vec<String>]) -> Analysis {
    let mut words = Vec::new();
    let mut soft_before = Vec::new();
    let mut hard_before = Vec::new();
    let (mut soft, mut hard) = (false, false);
    for p in text::pieces(sentence) {
        match p {
            Piece::Word(w) => {
                words.push(w);
                soft_before.push(soft);
                hard_before.push(hard);
                soft = false;
                hard = false;
            }
            Piece::Punct(',' | ':') => soft = true,
            Piece::Punct('(' | ')') => {}
            Piece::Punct(_) => hard = true,
        }
    }
    let n = words.len();

    // Mentions: scan each run of words not separated by hard punctuation.
    let mut spans = Vec::new();
    let mut seg_start = 0;
    for i in 1..=n {
        if i == n || hard_before[i] {
            for s in kb.scan(&words[seg_start..i]) {
                spans.push((s.start + seg_start, s.end + seg_start, s));
            }
            seg_start = i;
        }
    }
    let mut inside = vec![false; n];
    for (s, e, _) in &spans {
        inside[*s..*e].iter_mut().for_each(|x| *x = true);
    }

    let mut negated = vec![false; n];
    let mut cue_start = vec![false; n];
    let mut is_cue = vec![false; n];
    let mut contrastive = vec![false; n];
    let mut active = false;
    let mut i = 0;
    while i < n {
        if hard_before[i] {
            active = false;
        }
        if !inside[i] && CONTRASTIVE.contains(&words[i].as_str()) {
            active = false;
            contrastive[i] = true;
        }
        let cue_len = cues
            .iter()
            .filter(|c| {
                i + c.len() <= n
                    && words[i..i + c.len()] == c[..]
                    && !inside[i..i + c.len()].iter().any(|x| *x)
            })
            .map(Vec::len)
            .max();
        if let Some(len) = cue_len {
            active = true;
            cue_start[i] = true;
            for j in i..i + len {
                is_cue[j] = true;
                negated[j] = true;
            }
            i += len;
            continue;
        }
        negated[i] = active;
        i += 1;
    }

    let mentions = spans
        .into_iter()
        .map(|(s, e, span)| {
            (
                s,
                e,
                Mention {
                    concept: span.concept,
                    surface: span.surface,
                    kind: span.kind,
                    negated: negated[s],
                },
            )
        })
        .collect();
    Analysis {
        words,
        soft_before,
        negated,
        cue_start,
        is_cue,
        contrastive,
        mentions,
    }
}

/// Rewrites mentions in a sentence that names a relative: problems become the
/// matching family-history concept, or are dropped when the knowledge base
/// has none (the relative's condition says nothing about the patient).
fn apply_family_composition(a: &mut Analysis, kb: &KnowledgeBase) {
    if !a.has_family_cue() {
        return;
    }
    let composed = std::mem::take(&mut a.mentions)
        .into_iter()
        .filter_map(|(s, e, m)| {
            let concept = kb.concept(&m.concept.concept_id)?;
            let is_problem = matches!(
                concept.semantic_type,
                SemanticType::Diagnosis | SemanticType::Symptom | SemanticType::Finding
            );
            let already_family = concept
                .slot
                .as_ref()
                .is_some_and(|slot| slot.name == "family_history");
            if !is_problem || already_family {
                return Some((s, e, m));
            }
            [&m.concept.preferred_term, &m.surface]
                .iter()
                .find_map(|t| kb.resolve(&format!("family history of {t}")))
                .map(|fh| {
                    let surface = text::surface_key(&format!("family history of {}", m.surface));
                    (
                        s,
                        e,
                        Mention {
                            concept: fh,
                            surface,
                            kind: SurfaceKind::Synonym,
                            negated: m.negated,
                        },
                    )
                })
        })
        .collect();
    a.mentions = composed;
}

fn analyze_composed(sentence: &str, kb: &KnowledgeBase, cues: &[Vec<String>]) -> Analysis {
    let mut a = analyze(sentence, kb, cues);
    apply_family_composition(&mut a, kb);
    a
}

/// Concept mentions in one sentence, with negation and family composition
/// applied exactly as fact and claim extraction do.
pub fn mentions_in(sentence: &str, kb: &KnowledgeBase, cfg: &ExtractorConfig) -> Vec<Mention> {
    analyze_composed(sentence, kb, &cfg.cue_words())
        .mentions
        .into_iter()
        .map(|(_, _, m)| m)
        .collect()
}

fn is_bare_denial(words: &[String]) -> bool {
    !words.is_empty()
        && words.iter().any(|w| DENIAL_HEADS.contains(&w.as_str()))
        && words
            .iter()
            .all(|w| DENIAL_HEADS.contains(&w.as_str()) || DENIAL_FILLER.contains(&w.as_str()))
}

fn is_question(sentence: &str) -> bool {
    sentence.trim_end().ends_with('?')
}

fn doctor_section(words: &[String]) -> Option<SectionLabel> {
    let has = |cues: &[&str]| words.iter().any(|w| cues.contains(&w.as_str()));
    if has(EXAM_CUES) {
        Some(SectionLabel::Objective)
    } else if has(ASSESSMENT_CUES) {
        Some(SectionLabel::Assessment)
    } else if has(PLAN_CUES) {
        Some(SectionLabel::Plan)
    } else {
        None
    }
}

/// A comma/negation-delimited piece of one sentence with uniform polarity.
#[derive(Debug, Clone)]
struct Fragment {
    sentence: usize,
    range: std::ops::Range<usize>,
    polarity: Polarity,
    section: SectionLabel,
}

fn fragments(a: &Analysis, sentence: usize, section: SectionLabel) -> Vec<Fragment> {
    let n = a.words.len();
    if n == 0 {
        return Vec::new();
    }
    let inside = a.inside_mention();
    let starts_mention: BTreeSet<usize> = a.mentions.iter().map(|(s, _, _)| *s).collect();
    let mut cuts = vec![0];
    for (i, &within) in inside.iter().enumerate().take(n).skip(1) {
        let mid_mention = within && !starts_mention.contains(&i);
        if !mid_mention && (a.soft_before[i] || a.cue_start[i] || a.contrastive[i]) {
            cuts.push(i);
        }
    }
    cuts.push(n);
    let mut out: Vec<Fragment> = Vec::new();
    for w in cuts.windows(2) {
        let range = w[0]..w[1];
        let words = &a.words[range.clone()];
        let has_mention = a.mentions.iter().any(|(s, _, _)| range.contains(s));
        let neutral = !has_mention && a.tokens(range.clone()).is_empty() && !a.cue_start[range.start];
        let polarity = if neutral {
            out.last().map(|f| f.polarity).unwrap_or(Polarity::Asserted)
        } else if a.negated[range.start] || is_bare_denial(words) {
            Polarity::Denied
        } else {
            Polarity::Asserted
        };
        out.push(Fragment {
            sentence,
            range,
            polarity,
            section,
        });
    }
    out
}

struct TurnFacts {
    facts: Vec<Fact>,
    /// Concepts mentioned anywhere in the turn (after composition).
    concepts: BTreeSet<String>,
    first_fragment_bare_denial: bool,
}

fn turn_facts(
    turn_index: usize,
    speaker: Speaker,
    text_: &str,
    kb: &KnowledgeBase,
    cues: &[Vec<String>],
) -> (TurnFacts, Vec<Mention>) {
    let sentences = text::split_sentences(text_);
    let mut topic: Vec<Mention> = Vec::new();
    let mut analyses = Vec::new();
    let mut frags = Vec::new();
    let mut concepts = BTreeSet::new();
    let mut section = SectionLabel::Subjective;
    for sentence in &sentences {
        let a = analyze_composed(sentence, kb, cues);
        concepts.extend(a.mentions.iter().map(|(_, _, m)| m.concept.concept_id.clone()));
        let idx = analyses.len();
        if is_question(sentence) {
            if speaker == Speaker::Doctor {
                for (_, _, m) in &a.mentions {
                    if !m.negated && !topic.iter().any(|t| t.concept == m.concept) {
                        topic.push(m.clone());
                    }
                }
            }
        } else {
            if speaker == Speaker::Doctor {
                section = doctor_section(&a.words).unwrap_or(section);
            }
            frags.extend(fragments(&a, idx, section));
        }
        analyses.push(a);
    }
    let first_fragment_bare_denial = frags
        .first()
        .is_some_and(|f| is_bare_denial(&analyses[f.sentence].words[f.range.clone()]));

    // Merge consecutive fragments sharing polarity and section.
    let mut groups: Vec<Vec<Fragment>> = Vec::new();
    for f in frags {
        match groups.last_mut() {
            Some(g) if g[0].polarity == f.polarity && g[0].section == f.section => g.push(f),
            _ => groups.push(vec![f]),
        }
    }
    let facts = groups
        .into_iter()
        .map(|g| {
            let mut words = Vec::new();
            let mut mentions: Vec<Mention> = Vec::new();
            let mut tokens = Vec::new();
            let mut raw_sentences: Vec<usize> = Vec::new();
            for f in &g {
                let a = &analyses[f.sentence];
                words.extend(a.words[f.range.clone()].iter().cloned());
                tokens.extend(a.tokens(f.range.clone()));
                for (s, _, m) in &a.mentions {
                    if f.range.contains(s) && !mentions.contains(m) {
                        mentions.push(m.clone());
                    }
                }
                if raw_sentences.last() != Some(&f.sentence) {
                    raw_sentences.push(f.sentence);
                }
            }
            let raw = raw_sentences
                .iter()
                .map(|&i| sentences[i].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            Fact {
                id: String::new(),
                text: words.join(" "),
                raw,
                section: g[0].section,
                source_turns: vec![turn_index],
                concepts: Vec::new(),
                mentions,
                tokens,
                polarity: g[0].polarity,
            }
        })
        .collect();
    (
        TurnFacts {
            facts,
            concepts,
            first_fragment_bare_denial,
        },
        topic,
    )
}

/// Carries the concepts of the question just asked into the first fact of an
/// elliptical answer, composing drug + topic concepts ("penicillin" answering
/// "drug allergies?" yields penicillin allergy).
fn carry_topic(answer: &mut TurnFacts, topic: &[Mention], question_turn: usize, kb: &KnowledgeBase) {
    if topic.is_empty() || topic.iter().any(|t| answer.concepts.contains(&t.concept.concept_id)) {
        return;
    }
    let Some(first) = answer.facts.first_mut() else {
        return;
    };
    let polarity = if answer.first_fragment_bare_denial {
        Polarity::Denied
    } else if first.polarity == Polarity::Asserted {
        Polarity::Asserted
    } else {
        return;
    };
    if first.polarity != polarity {
        return;
    }
    let negated = polarity == Polarity::Denied;
    let prefix = topic
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let prefix_tokens: Vec<LexToken> = topic
        .iter()
        .flat_map(|t| text::words(&t.surface))
        .filter(|w| !is_stopword(w))
        .map(|w| LexToken {
            word: fold(&w),
            negated,
        })
        .collect();

    let mut added: Vec<Mention> = topic
        .iter()
        .map(|t| Mention {
            negated,
            ..t.clone()
        })
        .collect();
    for t in topic {
        let topic_words = text::words(&t.concept.preferred_term);
        for x in first.mentions.iter().filter(|m| {
            kb.concept(&m.concept.concept_id)
                .is_some_and(|c| c.semantic_type == SemanticType::Drug)
        }) {
            let composed = (0..topic_words.len()).find_map(|k| {
                let term = format!("{} {}", x.concept.preferred_term, topic_words[k..].join(" "));
                kb.resolve(&term)
                    .filter(|c| *c != x.concept)
                    .map(|c| (c, text::surface_key(&term)))
            });
            if let Some((concept, surface)) = composed {
                added.push(Mention {
                    concept,
                    surface,
                    kind: SurfaceKind::Synonym,
                    negated,
                });
            }
        }
    }
    first.text = format!("{prefix}: {}", first.text);
    let mut tokens = prefix_tokens;
    tokens.append(&mut first.tokens);
    first.tokens = tokens;
    for m in added {
        if !first.mentions.contains(&m) {
            first.mentions.push(m);
        }
    }
    first.source_turns.insert(0, question_turn);
}

fn finish_fact(f: &mut Fact, transcript_id: &str, n: usize) {
    f.id = format!("{transcript_id}:F{n:03}");
    let mut concepts: Vec<ConceptRef> = Vec::new();
    for m in &f.mentions {
        if !concepts.contains(&m.concept) {
            concepts.push(m.concept.clone());
        }
    }
    f.concepts = concepts;
}

/// Builds the fact base for a transcript.
pub fn extract_facts(
    t: &Transcript,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
) -> Result<FactBase, ExtractError> {
    cfg.validate()?;
    if cfg.mode == ExtractorMode::ExternalModel {
        return Err(ExtractError::EndpointRequired);
    }
    let cues = cfg.cue_words();
    let mut facts = Vec::new();
    let mut pending_topic: Option<(usize, Vec<Mention>)> = None;
    for turn in &t.turns {
        let (mut tf, topic) = turn_facts(turn.index, turn.speaker, &turn.text, kb, &cues);
        if turn.speaker == Speaker::Patient {
            if let Some((q, topic)) = pending_topic.take() {
                carry_topic(&mut tf, &topic, q, kb);
            }
        }
        pending_topic = (turn.speaker == Speaker::Doctor).then_some((turn.index, topic));
        facts.extend(tf.facts);
    }
    for (i, f) in facts.iter_mut().enumerate() {
        finish_fact(f, &t.id, i + 1);
    }
    Ok(FactBase::new(t.id.clone(), facts)?)
}

/// Builds facts from an external model's line-oriented output:
/// `<turn index>\t<section>\t<statement>` per line. Concepts, negation and
/// tokens are still resolved locally against the knowledge base.
pub fn extract_facts_external(
    t: &Transcript,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
    endpoint: &dyn Endpoint,
) -> Result<FactBase, ExtractError> {
    cfg.validate()?;
    let cues = cfg.cue_words();
    let prompt = format!(
        "List every atomic statement made in this physician-patient transcript, one per line, \
         as <turn index><TAB><Subjective|Objective|Assessment|Plan><TAB><statement>.\n\n{}",
        t.turns
            .iter()
            .map(|turn| format!("[{}] {}: {}", turn.index, turn.speaker, turn.text))
            .collect::<Vec<_>>()
            .join("\n")
    );
    let raw = endpoint.complete(&format!("{}:facts", t.id), &prompt)?;
    let mut facts = Vec::new();
    for (lineno, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: &str| ExtractError::ExternalOutput {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let mut cols = line.splitn(3, '\t');
        let (Some(turn), Some(section), Some(statement)) = (cols.next(), cols.next(), cols.next())
        else {
            return Err(bad("expected three tab-separated columns"));
        };
        let turn: usize = turn.trim().parse().map_err(|_| bad("turn index is not a number"))?;
        if turn >= t.turns.len() {
            return Err(bad("turn index out of range"));
        }
        let section: SectionLabel = section.parse().map_err(|_| bad("unknown section"))?;
        let a = analyze_composed(statement, kb, &cues);
        let n = a.words.len();
        let polarity = if a.mentions.iter().any(|(_, _, m)| m.negated)
            || (a.mentions.is_empty() && a.negated.iter().any(|x| *x))
        {
            Polarity::Denied
        } else {
            Polarity::Asserted
        };
        facts.push(Fact {
            id: String::new(),
            text: a.words.join(" "),
            raw: statement.trim().to_string(),
            section,
            source_turns: vec![turn],
            concepts: Vec::new(),
            mentions: a.mentions.iter().map(|(_, _, m)| m.clone()).collect(),
            tokens: a.tokens(0..n),
            polarity,
        });
    }
    for (i, f) in facts.iter_mut().enumerate() {
        finish_fact(f, &t.id, i + 1);
    }
    Ok(FactBase::new(t.id.clone(), facts)?)
}

fn split_conjunctions(part: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for w in part.split_whitespace() {
        if matches!(w.to_ascii_lowercase().as_str(), "and" | "or" | "but") && !cur.is_empty() {
            out.push(cur.join(" "));
            cur.clear();
        } else {
            cur.push(w);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join(" "));
    }
    out
}

/// Cuts a section into claim texts: sentences, then semicolons, then (in
/// Assessment) top-level commas.
pub fn split_claim_texts(section: SectionLabel, body: &str, mode: SentenceSplit) -> Vec<String> {
    let mut out = Vec::new();
    for sentence in text::split_sentences(body) {
        let mut parts = text::split_top_level(&sentence, ';');
        if section == SectionLabel::Assessment {
            parts = parts
                .iter()
                .flat_map(|p| text::split_top_level(p, ','))
                .collect();
        }
        if mode == SentenceSplit::PunctuationPlusConjunctions {
            parts = parts.iter().flat_map(|p| split_conjunctions(p)).collect();
        }
        out.extend(
            parts
                .into_iter()
                .map(|p| text::trim_terminal(&p))
                .filter(|p| p.chars().any(char::is_alphanumeric)),
        );
    }
    out
}

fn claim_kind(section: SectionLabel, words: &[String], mentions: &[Mention], kb: &KnowledgeBase) -> ClaimKind {
    let concept_type = |m: &Mention| kb.concept(&m.concept.concept_id).map(|c| c.semantic_type);
    let slot_named = |name: &str| {
        mentions.iter().any(|m| {
            kb.concept(&m.concept.concept_id)
                .and_then(|c| c.slot.as_ref())
                .is_some_and(|s| s.name == name)
        })
    };
    match section {
        SectionLabel::Plan => ClaimKind::PlanAction,
        SectionLabel::Assessment => ClaimKind::Diagnosis,
        SectionLabel::Objective => {
            let all_summary = mentions.iter().all(|m| {
                kb.rules_concluding(&m.concept.concept_id)
                    .any(|r| r.kind == crate::kb::RuleKind::SummaryConvention)
            });
            if mentions.is_empty() || all_summary {
                ClaimKind::SummaryStatement
            } else {
                ClaimKind::ExamFinding
            }
        }
        SectionLabel::Subjective => {
            let has = |cues: &[&str]| words.iter().any(|w| cues.contains(&w.as_str()));
            if has(ALLERGY_CUES) || slot_named("allergy") {
                return ClaimKind::Allergy;
            }
            if has(HISTORY_CUES) || slot_named("family_history") {
                return ClaimKind::History;
            }
            match mentions.first().and_then(concept_type) {
                Some(SemanticType::Drug) => ClaimKind::Medication,
                Some(SemanticType::Symptom) => ClaimKind::Symptom,
                Some(SemanticType::Procedure) => ClaimKind::Procedure,
                Some(_) => ClaimKind::History,
                None => ClaimKind::SummaryStatement,
            }
        }
    }
}

/// Builds a claim from one cut of note text.
pub fn make_claim(
    id: String,
    section: SectionLabel,
    claim_text: &str,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
) -> Claim {
    let a = analyze_composed(claim_text, kb, &cfg.cue_words());
    let mentions: Vec<Mention> = a.mentions.iter().map(|(_, _, m)| m.clone()).collect();
    let mut concepts: Vec<ConceptRef> = Vec::new();
    for m in &mentions {
        if !concepts.contains(&m.concept) {
            concepts.push(m.concept.clone());
        }
    }
    Claim {
        kind: claim_kind(section, &a.words, &mentions, kb),
        id,
        text: claim_text.to_string(),
        section,
        concepts,
        tokens: a.tokens(0..a.words.len()),
        mentions,
    }
}

/// Splits the note into claims, in section order.
pub fn extract_claims(
    s: &SoapNote,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
) -> Result<Vec<Claim>, ExtractError> {
    cfg.validate()?;
    if cfg.mode == ExtractorMode::ExternalModel {
        return Err(ExtractError::EndpointRequired);
    }
    let mut claims = Vec::new();
    for (section, body) in s.sections() {
        for t in split_claim_texts(section, body, cfg.sentence_split) {
            let id = format!("{}:C{:03}", s.id, claims.len() + 1);
            claims.push(make_claim(id, section, &t, kb, cfg));
        }
    }
    Ok(claims)
}

/// Claims from an external model: one `<section>\t<claim>` line each.
pub fn extract_claims_external(
    s: &SoapNote,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
    endpoint: &dyn Endpoint,
) -> Result<Vec<Claim>, ExtractError> {
    cfg.validate()?;
    let prompt = format!(
        "Split this SOAP note into atomic claims, one per line, as \
         <Subjective|Objective|Assessment|Plan><TAB><claim>.\n\n{}",
        s.to_text()
    );
    let raw = endpoint.complete(&format!("{}:claims", s.id), &prompt)?;
    let mut claims = Vec::new();
    for (lineno, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (section, t) = line.split_once('\t').ok_or_else(|| ExtractError::ExternalOutput {
            line: lineno + 1,
            reason: "expected <section><TAB><claim>".into(),
        })?;
        let section: SectionLabel = section.parse().map_err(|_| ExtractError::ExternalOutput {
            line: lineno + 1,
            reason: format!("unknown section {section:?}"),
        })?;
        let t = text::trim_terminal(t);
        if t.is_empty() {
            continue;
        }
        let id = format!("{}:C{:03}", s.id, claims.len() + 1);
        claims.push(make_claim(id, section, &t, kb, cfg));
    }
    Ok(claims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_soap_note, parse_transcript};

    fn kb() -> KnowledgeBase {
        KnowledgeBase::seed()
    }

    fn facts(raw: &str) -> FactBase {
        let t = parse_transcript(raw, "t").unwrap();
        extract_facts(&t, &kb(), &ExtractorConfig::default()).unwrap()
    }

    fn ids(f: &Fact) -> Vec<&str> {
        f.concepts.iter().map(|c| c.concept_id.as_str()).collect()
    }

    #[test]
    fn elliptical_allergy_answer_composes_penicillin_allergy() {
        let fb = facts("Doctor: Any known drug allergies?\nPatient: Penicillin I got a rash from it years ago.");
        let f = &fb.facts[0];
        assert_eq!(f.polarity, Polarity::Asserted);
        assert_eq!(f.section, SectionLabel::Subjective);
        assert!(ids(f).contains(&"find.penicillin_allergy"), "{:?}", ids(f));
        assert_eq!(f.source_turns, vec![0, 1]);
        assert!(f.text.starts_with("drug allergies: penicillin"));
    }

    #[test]
    fn bare_denial_carries_question_topic_as_denied() {
        let fb = facts(
            "Doctor: Have you noticed any blood in your stool or vomit, or have your stools been black or tarry?\n\
             Patient: No, nothing like that. Normal stools.",
        );
        let f = &fb.facts[0];
        assert_eq!(f.polarity, Polarity::Denied);
        assert!(ids(f).contains(&"sym.melena"));
        assert!(ids(f).contains(&"sym.hematochezia"));
        assert!(f.mentions.iter().all(|m| m.negated));
        assert_eq!(fb.facts[1].polarity, Polarity::Asserted);
    }

    #[test]
    fn negation_scope_stops_at_sentence_and_contrast() {
        let fb = facts("Patient: Yeah, some nausea. No vomiting though.");
        assert_eq!(ids(&fb.facts[0]), ["sym.nausea"]);
        assert_eq!(fb.facts[0].polarity, Polarity::Asserted);
        assert_eq!(ids(&fb.facts[1]), ["sym.vomiting"]);
        assert_eq!(fb.facts[1].polarity, Polarity::Denied);
    }

    #[test]
    fn relative_conditions_become_family_history() {
        let fb = facts("Patient: And my dad had stomach problems, ulcers I believe.");
        assert_eq!(ids(&fb.facts[0]), ["find.fh_pud"]);
    }

    #[test]
    fn exam_sentences_land_in_objective() {
        let fb = facts("Doctor: Let me do a quick exam. No guarding, no rigidity. Bowel sounds are normal.");
        let sections: Vec<_> = fb.facts.iter().map(|f| (f.section, f.polarity)).collect();
        assert_eq!(
            sections,
            [
                (SectionLabel::Objective, Polarity::Asserted),
                (SectionLabel::Objective, Polarity::Denied),
                (SectionLabel::Objective, Polarity::Asserted)
            ]
        );
    }

    #[test]
    fn greeting_yields_no_concept_facts() {
        let fb = facts("Doctor: Good morning, how are you today.");
        assert!(fb.facts.iter().all(|f| f.concepts.is_empty()));
        assert!(fb.index.is_empty());
    }

    #[test]
    fn assessment_list_splits_into_diagnoses() {
        let note = parse_soap_note(
            "Subjective:\nObjective:\nAlert, in no acute distress.\nAssessment:\nPeptic ulcer disease; rule out H. pylori co-infection; GERD; hypertension.\nPlan:\n",
            "n",
        )
        .unwrap();
        let claims = extract_claims(&note, &kb(), &ExtractorConfig::default()).unwrap();
        let dx: Vec<_> = claims
            .iter()
            .filter(|c| c.section == SectionLabel::Assessment)
            .collect();
        assert_eq!(dx.len(), 4);
        assert!(dx.iter().all(|c| c.kind == ClaimKind::Diagnosis));
        let obj: Vec<_> = claims
            .iter()
            .filter(|c| c.section == SectionLabel::Objective)
            .collect();
        assert_eq!(obj.len(), 1);
        assert_eq!(obj[0].kind, ClaimKind::SummaryStatement);
        assert!(claims.iter().all(|c| c.section != SectionLabel::Plan));
    }

    #[test]
    fn claim_negation_marks_every_listed_item() {
        let claim = make_claim(
            "c".into(),
            SectionLabel::Subjective,
            "Patient denies dysphagia, melena, hematochezia",
            &kb(),
            &ExtractorConfig::default(),
        );
        assert_eq!(claim.mentions.len(), 3);
        assert!(claim.mentions.iter().all(|m| m.negated));
        assert_eq!(claim.kind, ClaimKind::Symptom);
    }

    #[test]
    fn negation_inside_a_surface_is_not_a_cue() {
        let claim = make_claim(
            "c".into(),
            SectionLabel::Objective,
            "Alert, in no acute distress",
            &kb(),
            &ExtractorConfig::default(),
        );
        assert_eq!(claim.mentions.len(), 1);
        assert!(!claim.mentions[0].negated);
    }

    #[test]
    fn conjunction_split_mode() {
        let parts = split_claim_texts(
            SectionLabel::Subjective,
            "Nausea and vomiting.",
            SentenceSplit::PunctuationPlusConjunctions,
        );
        assert_eq!(parts, ["Nausea", "vomiting"]);
    }

    #[test]
    fn empty_cue_list_is_rejected() {
        let cfg = ExtractorConfig {
            negation_cues: vec![],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ExtractError::NoNegationCues)));
    }
}
