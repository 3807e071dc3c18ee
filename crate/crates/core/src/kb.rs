//! Clinical knowledge base: concepts with synonym sets, trade/generic drug
//! equivalences, and inference rules (diagnostic inference, plan guidelines,
//! documentation summary conventions).
//!
//! Surface matching is exact on canonical surface keys (see
//! [`crate::text::surface_key`]); there is no fuzzy matching. A single
//! `surface_index` maps every synonym and trade name to exactly one concept,
//! and is rebuilt deterministically whenever a knowledge base is loaded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_format_version, Claim, FactBase, ModelError, Polarity, FORMAT_MAJOR};
use crate::text::surface_key;

/// Rules that omit `min_match` require this many antecedents.
pub const DEFAULT_MIN_MATCH: usize = 2;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("surface form {surface:?} maps to both {first} and {second}")]
    DuplicateSurfaceForm {
        surface: String,
        first: String,
        second: String,
    },
    #[error("{context} references unknown concept {concept_id}")]
    DanglingConceptRef { context: String, concept_id: String },
    #[error("duplicate concept id {0}")]
    DuplicateConceptId(String),
    #[error("duplicate rule id {0}")]
    DuplicateRuleId(String),
    #[error("invalid rule {rule_id}: {reason}")]
    InvalidRule { rule_id: String, reason: String },
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: u64,
        reason: String,
    },
    #[error(transparent)]
    Format(#[from] ModelError),
    #[error("bundle: {0}")]
    Bundle(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptRef {
    pub concept_id: String,
    pub preferred_term: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticType {
    Symptom,
    Diagnosis,
    Drug,
    Procedure,
    Anatomy,
    Finding,
    LifestyleFactor,
}

impl FromStr for SemanticType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        use SemanticType::*;
        [Symptom, Diagnosis, Drug, Procedure, Anatomy, Finding, LifestyleFactor]
            .into_iter()
            .find(|t| format!("{t:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or(())
    }
}

/// Attribute slot used for contradiction detection. An exclusive slot is
/// stated exhaustively in a history (drug allergies): asserting a different
/// filler contradicts it. Non-exclusive slots (family history items) do not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub exclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub reference: ConceptRef,
    pub semantic_type: SemanticType,
    /// Normalized surface keys, always including the preferred term's key.
    pub synonyms: BTreeSet<String>,
    #[serde(default)]
    pub codes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<SlotSpec>,
}

impl Concept {
    pub fn id(&self) -> &str {
        &self.reference.concept_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugEquivalence {
    pub generic: ConceptRef,
    pub trade_names: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleKind {
    DiagnosticInference,
    PlanGuideline,
    SummaryConvention,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for RuleKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        use RuleKind::*;
        [DiagnosticInference, PlanGuideline, SummaryConvention]
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRule {
    pub rule_id: String,
    /// Sorted by concept id, no duplicates.
    pub antecedents: Vec<ConceptRef>,
    pub min_match: usize,
    pub consequent: ConceptRef,
    pub kind: RuleKind,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurfaceKind {
    Preferred,
    Synonym,
    Trade,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceEntry {
    pub concept_id: String,
    pub kind: SurfaceKind,
}

/// A matched span of words `[start, end)` resolving to a concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub concept: ConceptRef,
    pub kind: SurfaceKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum RetrievedEntry {
    Concept(Concept),
    DrugEquivalence(DrugEquivalence),
    Rule(InferenceRule),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AntecedentMatch {
    pub concept: ConceptRef,
    pub fact_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub rule_id: String,
    pub kind: RuleKind,
    pub consequent: ConceptRef,
    pub matched: Vec<AntecedentMatch>,
}

impl RuleMatch {
    /// Distinct supporting fact ids, in first-seen order.
    pub fn evidence(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for m in &self.matched {
            for id in &m.fact_ids {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Bundle {
    format_version: String,
    concepts: Vec<Concept>,
    drug_equivalences: Vec<DrugEquivalence>,
    rules: Vec<InferenceRule>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    concepts: Vec<Concept>,
    drug_equivalences: Vec<DrugEquivalence>,
    rules: Vec<InferenceRule>,
    by_id: HashMap<String, usize>,
    surface_index: BTreeMap<String, SurfaceEntry>,
    max_surface_words: usize,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts
            && self.drug_equivalences == other.drug_equivalences
            && self.rules == other.rules
    }
}

impl KnowledgeBase {
    /// Validates the parts and builds the surface index.
    pub fn from_parts(
        mut concepts: Vec<Concept>,
        mut drug_equivalences: Vec<DrugEquivalence>,
        mut rules: Vec<InferenceRule>,
    ) -> Result<Self, KbError> {
        concepts.sort_by(|a, b| a.reference.concept_id.cmp(&b.reference.concept_id));
        drug_equivalences.sort_by(|a, b| a.generic.concept_id.cmp(&b.generic.concept_id));
        rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));

        let mut by_id = HashMap::new();
        for (i, c) in concepts.iter_mut().enumerate() {
            if by_id.insert(c.reference.concept_id.clone(), i).is_some() {
                return Err(KbError::DuplicateConceptId(c.reference.concept_id.clone()));
            }
            c.synonyms = c
                .synonyms
                .iter()
                .map(|s| surface_key(s))
                .filter(|s| !s.is_empty())
                .collect();
            c.synonyms.insert(surface_key(&c.reference.preferred_term));
        }

        let canonical = |r: &ConceptRef, context: &str| -> Result<ConceptRef, KbError> {
            by_id
                .get(&r.concept_id)
                .map(|&i| concepts[i].reference.clone())
                .ok_or_else(|| KbError::DanglingConceptRef {
                    context: context.to_string(),
                    concept_id: r.concept_id.clone(),
                })
        };

        for d in &mut drug_equivalences {
            d.generic = canonical(&d.generic, "drug equivalence")?;
            d.trade_names = d.trade_names.iter().map(|s| surface_key(s)).collect();
            if d.trade_names.is_empty() {
                return Err(KbError::InvalidRule {
                    rule_id: format!("drug:{}", d.generic.concept_id),
                    reason: "no trade names".into(),
                });
            }
        }

        let mut seen_rules = BTreeSet::new();
        for r in &mut rules {
            if !seen_rules.insert(r.rule_id.clone()) {
                return Err(KbError::DuplicateRuleId(r.rule_id.clone()));
            }
            let ctx = format!("rule {}", r.rule_id);
            r.consequent = canonical(&r.consequent, &ctx)?;
            let mut ants = r
                .antecedents
                .iter()
                .map(|a| canonical(a, &ctx))
                .collect::<Result<Vec<_>, _>>()?;
            ants.sort();
            ants.dedup();
            r.antecedents = ants;
            let invalid = |reason: &str| KbError::InvalidRule {
                rule_id: r.rule_id.clone(),
                reason: reason.to_string(),
            };
            if r.antecedents.is_empty() {
                return Err(invalid("no antecedents"));
            }
            if r.min_match == 0 || r.min_match > r.antecedents.len() {
                return Err(invalid("min_match must be between 1 and the antecedent count"));
            }
            if r.antecedents.contains(&r.consequent) {
                return Err(invalid("consequent is also an antecedent"));
            }
        }

        let mut surface_index: BTreeMap<String, SurfaceEntry> = BTreeMap::new();
        let mut insert = |surface: &str, concept_id: &str, kind| -> Result<(), KbError> {
            if let Some(prev) = surface_index.get(surface) {
                return Err(KbError::DuplicateSurfaceForm {
                    surface: surface.to_string(),
                    first: prev.concept_id.clone(),
                    second: concept_id.to_string(),
                });
            }
            surface_index.insert(
                surface.to_string(),
                SurfaceEntry {
                    concept_id: concept_id.to_string(),
                    kind,
                },
            );
            Ok(())
        };
        for c in &concepts {
            let preferred = surface_key(&c.reference.preferred_term);
            for s in &c.synonyms {
                let kind = if *s == preferred {
                    SurfaceKind::Preferred
                } else {
                    SurfaceKind::Synonym
                };
                insert(s, c.id(), kind)?;
            }
        }
        for d in &drug_equivalences {
            for t in &d.trade_names {
                insert(t, &d.generic.concept_id, SurfaceKind::Trade)?;
            }
        }
        let max_surface_words = surface_index
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(0);

        Ok(KnowledgeBase {
            concepts,
            drug_equivalences,
            rules,
            by_id,
            surface_index,
            max_surface_words,
        })
    }

    /// Ingests the three tabular files (tab-separated, header row, `#`
    /// comment lines; an optional `#format-version:` line is checked).
    pub fn ingest(concepts: &str, drugs: &str, rules: &str) -> Result<Self, KbError> {
        let concepts = parse_concepts(concepts, "concepts")?;
        let drugs = parse_drugs(drugs, "drugs")?;
        let rules = parse_rules(rules, "rules")?;
        Self::from_parts(concepts, drugs, rules)
    }

    pub fn ingest_files(concepts: &Path, drugs: &Path, rules: &Path) -> Result<Self, KbError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| KbError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let c = parse_concepts(&read(concepts)?, &concepts.display().to_string())?;
        let d = parse_drugs(&read(drugs)?, &drugs.display().to_string())?;
        let r = parse_rules(&read(rules)?, &rules.display().to_string())?;
        Self::from_parts(c, d, r)
    }

    /// The curated knowledge base bundled with the crate.
    pub fn seed() -> Self {
        Self::ingest(
            include_str!("../data/kb/concepts.tsv"),
            include_str!("../data/kb/drugs.tsv"),
            include_str!("../data/kb/rules.tsv"),
        )
        .expect("bundled seed knowledge base is valid")
    }

    pub fn to_bundle_json(&self) -> String {
        let bundle = Bundle {
            format_version: format!("{FORMAT_MAJOR}.0"),
            concepts: self.concepts.clone(),
            drug_equivalences: self.drug_equivalences.clone(),
            rules: self.rules.clone(),
        };
        serde_json::to_string_pretty(&bundle).expect("bundle serializes")
    }

    pub fn from_bundle_json(json: &str) -> Result<Self, KbError> {
        let bundle: Bundle = serde_json::from_str(json)?;
        check_format_version(&bundle.format_version)?;
        Self::from_parts(bundle.concepts, bundle.drug_equivalences, bundle.rules)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn drug_equivalences(&self) -> &[DrugEquivalence] {
        &self.drug_equivalences
    }

    pub fn rules(&self) -> &[InferenceRule] {
        &self.rules
    }

    pub fn surface_index(&self) -> &BTreeMap<String, SurfaceEntry> {
        &self.surface_index
    }

    pub fn concept(&self, concept_id: &str) -> Option<&Concept> {
        self.by_id.get(concept_id).map(|&i| &self.concepts[i])
    }

    pub fn contains(&self, concept_id: &str) -> bool {
        self.by_id.contains_key(concept_id)
    }

    pub fn drug_equivalence(&self, concept_id: &str) -> Option<&DrugEquivalence> {
        self.drug_equivalences
            .iter()
            .find(|d| d.generic.concept_id == concept_id)
    }

    /// Resolves a surface string (any casing or spacing) to its concept.
    pub fn resolve(&self, term: &str) -> Option<ConceptRef> {
        self.lookup(term).map(|(c, _)| c.reference.clone())
    }

    pub fn lookup(&self, term: &str) -> Option<(&Concept, SurfaceKind)> {
        let entry = self.surface_index.get(&surface_key(term))?;
        Some((self.concept(&entry.concept_id)?, entry.kind))
    }

    /// Greedy longest-match scan of a word sequence for known surfaces.
    pub fn scan(&self, words: &[String]) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let longest = (1..=self.max_surface_words.min(words.len() - i)).rev().find_map(|n| {
                let key = words[i..i + n].join(" ");
                self.surface_index.get(&key).map(|e| (n, key, e))
            });
            match longest {
                Some((n, key, entry)) => {
                    let concept = self.concepts[self.by_id[&entry.concept_id]].reference.clone();
                    spans.push(Span {
                        start: i,
                        end: i + n,
                        surface: key,
                        concept,
                        kind: entry.kind,
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        spans
    }

    pub fn rules_concluding<'a>(
        &'a self,
        concept_id: &'a str,
    ) -> impl Iterator<Item = &'a InferenceRule> + 'a {
        self.rules
            .iter()
            .filter(move |r| r.consequent.concept_id == concept_id)
    }

    pub fn is_consequent(&self, concept_id: &str) -> bool {
        self.rules_concluding(concept_id).next().is_some()
    }
}

/// Everything in the knowledge base touching the claim's concepts: the
/// concept records, drug equivalences on them, and rules whose consequent
/// or antecedents include them. Concepts in id order, then equivalences,
/// then rules in rule id order.
pub fn retrieve_context(claim: &Claim, kb: &KnowledgeBase) -> Vec<RetrievedEntry> {
    let ids: BTreeSet<&str> = claim
        .concepts
        .iter()
        .map(|c| c.concept_id.as_str())
        .collect();
    let mut out: Vec<RetrievedEntry> = ids
        .iter()
        .filter_map(|id| kb.concept(id))
        .map(|c| RetrievedEntry::Concept(c.clone()))
        .collect();
    out.extend(
        kb.drug_equivalences()
            .iter()
            .filter(|d| ids.contains(d.generic.concept_id.as_str()))
            .map(|d| RetrievedEntry::DrugEquivalence(d.clone())),
    );
    out.extend(
        kb.rules()
            .iter()
            .filter(|r| {
                ids.contains(r.consequent.concept_id.as_str())
                    || r.antecedents
                        .iter()
                        .any(|a| ids.contains(a.concept_id.as_str()))
            })
            .map(|r| RetrievedEntry::Rule(r.clone())),
    );
    out
}

/// Fires the rule when at least `min_match` antecedents have an asserted
/// fact. Denied facts never satisfy an antecedent.
pub fn match_rule(rule: &InferenceRule, facts: &FactBase) -> Option<RuleMatch> {
    let matched: Vec<AntecedentMatch> = rule
        .antecedents
        .iter()
        .filter_map(|a| {
            let fact_ids: Vec<String> = facts
                .facts_for(&a.concept_id)
                .filter(|f| f.polarity == Polarity::Asserted)
                .map(|f| f.id.clone())
                .collect();
            (!fact_ids.is_empty()).then(|| AntecedentMatch {
                concept: a.clone(),
                fact_ids,
            })
        })
        .collect();
    (matched.len() >= rule.min_match).then(|| RuleMatch {
        rule_id: rule.rule_id.clone(),
        kind: rule.kind,
        consequent: rule.consequent.clone(),
        matched,
    })
}

// ---- tabular ingestion ----

fn tsv_reader<'a>(text: &'a str, file: &str) -> Result<csv::Reader<&'a [u8]>, KbError> {
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                if k.trim().eq_ignore_ascii_case("format-version") {
                    check_format_version(v)?;
                }
            }
        } else if !line.is_empty() {
            break;
        }
    }
    let _ = file;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .quoting(false)
        .from_reader(text.as_bytes()))
}

struct Row {
    line: u64,
    fields: HashMap<String, String>,
}

fn rows(text: &str, file: &str, required: &[&str]) -> Result<Vec<Row>, KbError> {
    let mut rdr = tsv_reader(text, file)?;
    let malformed = |line: u64, reason: String| KbError::Malformed {
        file: file.to_string(),
        line,
        reason,
    };
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    for r in required {
        if !headers.iter().any(|h| h == r) {
            return Err(malformed(1, format!("missing column {r}")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let fields = headers
            .iter()
            .cloned()
            .zip(rec.iter().map(str::to_string))
            .collect::<HashMap<_, _>>();
        for r in required {
            if fields.get(*r).is_none_or(|v| v.is_empty()) {
                return Err(malformed(line, format!("empty required field {r}")));
            }
        }
        out.push(Row { line, fields });
    }
    Ok(out)
}

fn pipe_list(v: Option<&String>) -> Vec<String> {
    v.map(|s| {
        s.split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    })
    .unwrap_or_default()
}

fn placeholder(id: &str) -> ConceptRef {
    ConceptRef {
        concept_id: id.to_string(),
        preferred_term: String::new(),
    }
}

fn parse_concepts(text: &str, file: &str) -> Result<Vec<Concept>, KbError> {
    rows(text, file, &["id", "preferred_term", "semantic_type"])?
        .into_iter()
        .map(|row| {
            let f = &row.fields;
            let malformed = |reason: String| KbError::Malformed {
                file: file.to_string(),
                line: row.line,
                reason,
            };
            let semantic_type = f["semantic_type"]
                .parse()
                .map_err(|_| malformed(format!("unknown semantic type {:?}", f["semantic_type"])))?;
            let slot = f
                .get("slot")
                .filter(|s| !s.is_empty())
                .map(|name| SlotSpec {
                    name: name.clone(),
                    exclusive: f
                        .get("slot_exclusive")
                        .is_some_and(|v| matches!(v.to_ascii_lowercase().as_str(), "yes" | "true" | "1")),
                });
            Ok(Concept {
                reference: ConceptRef {
                    concept_id: f["id"].clone(),
                    preferred_term: f["preferred_term"].clone(),
                },
                semantic_type,
                synonyms: pipe_list(f.get("synonyms")).into_iter().collect(),
                codes: pipe_list(f.get("codes")),
                slot,
            })
        })
        .collect()
}

fn parse_drugs(text: &str, file: &str) -> Result<Vec<DrugEquivalence>, KbError> {
    rows(text, file, &["generic_id", "trade_names"])?
        .into_iter()
        .map(|row| {
            Ok(DrugEquivalence {
                generic: placeholder(&row.fields["generic_id"]),
                trade_names: pipe_list(row.fields.get("trade_names")).into_iter().collect(),
            })
        })
        .collect()
}

fn parse_rules(text: &str, file: &str) -> Result<Vec<InferenceRule>, KbError> {
    rows(text, file, &["rule_id", "antecedents", "consequent_id", "kind"])?
        .into_iter()
        .map(|row| {
            let f = &row.fields;
            let malformed = |reason: String| KbError::Malformed {
                file: file.to_string(),
                line: row.line,
                reason,
            };
            let min_match = match f.get("min_match").filter(|v| !v.is_empty()) {
                None => DEFAULT_MIN_MATCH,
                Some(v) => v
                    .parse()
                    .map_err(|_| malformed(format!("min_match {v:?} is not an integer")))?,
            };
            let kind = f["kind"]
                .parse()
                .map_err(|_| malformed(format!("unknown rule kind {:?}", f["kind"])))?;
            Ok(InferenceRule {
                rule_id: f["rule_id"].clone(),
                antecedents: pipe_list(f.get("antecedents"))
                    .iter()
                    .map(|a| placeholder(a))
                    .collect(),
                min_match,
                consequent: placeholder(&f["consequent_id"]),
                kind,
                provenance: f.get("provenance").cloned().unwrap_or_default(),
            })
        })
        .collect()
}
