//! Policy engine: classifies claims against a fact base under the strict
//! (Stage 1) or inference-aware (Stage 2) policy, recording a five-step trace.
//!
//! The safety floor is evaluated independently of the policy flags and
//! overrides every Supported outcome, so a floored claim is Hallucinated
//! under both policies.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::extract::{extract_claims, extract_facts, ExtractError, ExtractorConfig};
use crate::kb::{match_rule, KnowledgeBase, RuleKind, SemanticType, SurfaceKind};
use crate::model::{
    Claim, ClaimKind, Fact, FactBase, FiredRule, Label, LexToken, Mention, ModelError, PolicyId,
    ProtocolStep, SoapNote, StepOutcome, Tier, Transcript, Verdict,
};
use crate::report::NoteReport;
use crate::text::is_number;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("claim {claim_id} references concept {concept_id} absent from the knowledge base")]
    InconsistentInputs { claim_id: String, concept_id: String },
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub id: PolicyId,
    /// Trade and generic drug names are interchangeable.
    pub synonym_rule: bool,
    /// Evidence may come from any note section, not only the claim's own.
    pub cross_section: bool,
    /// Diagnostic-inference and plan-guideline rules may derive claims.
    pub inference_rules: bool,
    /// Summary-convention rules may derive summary statements.
    pub summary_conventions: bool,
}

impl PolicyConfig {
    pub fn stage1() -> Self {
        PolicyConfig {
            id: PolicyId::Stage1Strict,
            synonym_rule: false,
            cross_section: false,
            inference_rules: false,
            summary_conventions: false,
        }
    }

    pub fn stage2() -> Self {
        PolicyConfig {
            id: PolicyId::Stage2InferenceAware,
            synonym_rule: true,
            cross_section: true,
            inference_rules: true,
            summary_conventions: true,
        }
    }

    pub fn for_policy(id: PolicyId) -> Self {
        match id {
            PolicyId::Stage1Strict => Self::stage1(),
            PolicyId::Stage2InferenceAware => Self::stage2(),
        }
    }

    /// True for the two named policies; anything else is an ablation.
    pub fn is_canonical(&self) -> bool {
        *self == Self::for_policy(self.id)
    }
}

/// The request→verdict contract shared by the deterministic engine and
/// model-backed judges.
pub trait ClaimJudge: Sync {
    fn policy(&self) -> PolicyId;
    fn judge(&self, claim: &Claim, facts: &FactBase, kb: &KnowledgeBase)
        -> Result<Verdict, JudgeError>;
}

#[derive(Debug, Clone, Copy)]
pub struct DeterministicJudge {
    pub config: PolicyConfig,
}

impl DeterministicJudge {
    pub fn new(config: PolicyConfig) -> Self {
        DeterministicJudge { config }
    }
}

impl ClaimJudge for DeterministicJudge {
    fn policy(&self) -> PolicyId {
        self.config.id
    }

    fn judge(&self, claim: &Claim, facts: &FactBase, kb: &KnowledgeBase) -> Result<Verdict, JudgeError> {
        classify_claim(claim, facts, kb, &self.config)
    }
}

fn step(n: u8, description: impl Into<String>, outcome: StepOutcome) -> ProtocolStep {
    ProtocolStep {
        step_number: n,
        description: description.into(),
        outcome,
    }
}

fn asserts(f: &Fact, concept_id: &str) -> bool {
    f.mentions
        .iter()
        .any(|m| !m.negated && m.concept.concept_id == concept_id)
}

fn denies(f: &Fact, concept_id: &str) -> bool {
    f.mentions
        .iter()
        .any(|m| m.negated && m.concept.concept_id == concept_id)
}

fn semantic_type(kb: &KnowledgeBase, m: &Mention) -> Option<SemanticType> {
    kb.concept(&m.concept.concept_id).map(|c| c.semantic_type)
}

fn fired(kb: &KnowledgeBase, facts: &FactBase, concept_id: &str, kinds: &[RuleKind]) -> Vec<(FiredRule, Vec<String>)> {
    kb.rules_concluding(concept_id)
        .filter(|r| kinds.contains(&r.kind))
        .filter_map(|r| match_rule(r, facts))
        .map(|m| {
            let evidence = m.evidence();
            (
                FiredRule {
                    rule_id: m.rule_id,
                    kind: m.kind,
                },
                evidence,
            )
        })
        .collect()
}

/// Forced Hallucinated outcome, independent of policy flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloorHit {
    pub tier: Tier,
    pub evidence: Vec<String>,
    pub reason: String,
}

/// Checks the non-negotiable hallucination conditions: contradiction of a
/// stated fact, a medication (or its dose, frequency, duration) never
/// stated, a diagnosis neither stated nor derivable, and a procedure neither
/// stated nor covered by any firing rule. Uses every fact in every section.
pub fn floor_check(c: &Claim, f: &FactBase, kb: &KnowledgeBase) -> Option<FloorHit> {
    let ids_where = |pred: &dyn Fn(&Fact) -> bool| -> Vec<String> {
        f.facts.iter().filter(|x| pred(x)).map(|x| x.id.clone()).collect()
    };

    // Contradictions first: they outrank overreach.
    for m in &c.mentions {
        let id = m.concept.concept_id.as_str();
        let asserted = ids_where(&|x| asserts(x, id));
        let denied = ids_where(&|x| denies(x, id));
        if !m.negated && asserted.is_empty() && !denied.is_empty() {
            return Some(FloorHit {
                tier: Tier::T5Contradiction,
                evidence: denied,
                reason: format!("claim asserts {} which the transcript denies", m.concept.preferred_term),
            });
        }
        if m.negated && !asserted.is_empty() && denied.is_empty() {
            return Some(FloorHit {
                tier: Tier::T5Contradiction,
                evidence: asserted,
                reason: format!("claim negates {} which the transcript asserts", m.concept.preferred_term),
            });
        }
        if !m.negated && asserted.is_empty() {
            let slot = kb
                .concept(id)
                .and_then(|k| k.slot.as_ref())
                .filter(|s| s.exclusive);
            if let Some(slot) = slot {
                let rivals: Vec<&Fact> = f
                    .facts
                    .iter()
                    .filter(|x| {
                        x.mentions.iter().any(|o| {
                            !o.negated
                                && o.concept.concept_id != id
                                && kb
                                    .concept(&o.concept.concept_id)
                                    .and_then(|k| k.slot.as_ref())
                                    .is_some_and(|s| s.name == slot.name)
                        })
                    })
                    .collect();
                if !rivals.is_empty() {
                    return Some(FloorHit {
                        tier: Tier::T5Contradiction,
                        evidence: rivals.iter().map(|x| x.id.clone()).collect(),
                        reason: format!(
                            "claim states {} where the transcript records a different {}",
                            m.concept.preferred_term, slot.name
                        ),
                    });
                }
            }
        }
    }

    for m in c.mentions.iter().filter(|m| !m.negated) {
        let id = m.concept.concept_id.as_str();
        if f.facts.iter().any(|x| asserts(x, id)) {
            continue;
        }
        let term = &m.concept.preferred_term;
        let reason = match semantic_type(kb, m) {
            Some(SemanticType::Drug) => format!("medication {term} is never stated"),
            Some(SemanticType::Diagnosis)
                if fired(kb, f, id, &[RuleKind::DiagnosticInference]).is_empty() =>
            {
                format!("diagnosis {term} is neither stated nor derivable")
            }
            Some(SemanticType::Procedure)
                if fired(kb, f, id, &[RuleKind::DiagnosticInference, RuleKind::PlanGuideline, RuleKind::SummaryConvention])
                    .is_empty() =>
            {
                format!("procedure {term} is never mentioned and no rule covers it")
            }
            _ => continue,
        };
        return Some(FloorHit {
            tier: Tier::T4Overreach,
            evidence: Vec::new(),
            reason,
        });
    }

    // Dose, frequency and duration figures attached to a medication must be
    // stated alongside that medication.
    let numbers: BTreeSet<&str> = c
        .tokens
        .iter()
        .map(|t| t.word.as_str())
        .filter(|w| is_number(w))
        .collect();
    let drugs: Vec<&str> = c
        .mentions
        .iter()
        .filter(|m| !m.negated && semantic_type(kb, m) == Some(SemanticType::Drug))
        .map(|m| m.concept.concept_id.as_str())
        .collect();
    if !numbers.is_empty() && !drugs.is_empty() {
        let stated: BTreeSet<&str> = f
            .facts
            .iter()
            .filter(|x| drugs.iter().any(|d| asserts(x, d)))
            .flat_map(|x| x.tokens.iter().map(|t| t.word.as_str()))
            .collect();
        let missing: Vec<&str> = numbers.difference(&stated).copied().collect();
        if !missing.is_empty() {
            return Some(FloorHit {
                tier: Tier::T4Overreach,
                evidence: Vec::new(),
                reason: format!("medication figures {} are never stated", missing.join(", ")),
            });
        }
    }
    None
}

/// The floor as a standalone verdict (reported under the Stage 2 policy id).
pub fn safety_floor(c: &Claim, f: &FactBase, kb: &KnowledgeBase) -> Option<Verdict> {
    floor_check(c, f, kb).map(|hit| Verdict {
        claim_id: c.id.clone(),
        label: Label::Hallucinated,
        tier: hit.tier,
        evidence: hit.evidence,
        rules: Vec::new(),
        trace: vec![
            step(1, format!("state claim: {}", c.text), StepOutcome::Matched),
            step(5, format!("safety floor: {}", hit.reason), StepOutcome::Terminal),
        ],
        policy: PolicyId::Stage2InferenceAware,
        reason: hit.reason,
    })
}

/// A fact whose tokens contain every claim content token.
fn lexical_match<'a>(tokens: &[LexToken], scope: &[&'a Fact]) -> Option<&'a Fact> {
    if tokens.is_empty() {
        return None;
    }
    scope.iter().copied().find(|f| {
        let have: BTreeSet<&LexToken> = f.tokens.iter().collect();
        tokens.iter().all(|t| have.contains(t))
    })
}

/// How a claim mention is grounded in a fact mention.
fn mention_route(claim: &Mention, fact: &Mention, synonym_rule: bool) -> Option<Tier> {
    if claim.concept != fact.concept || claim.negated != fact.negated {
        return None;
    }
    let trade = claim.kind == SurfaceKind::Trade || fact.kind == SurfaceKind::Trade;
    if trade && claim.surface != fact.surface {
        synonym_rule.then_some(Tier::T2bDrugSynonym)
    } else {
        Some(Tier::T2aParaphrase)
    }
}

struct Coverage {
    tier: Tier,
    evidence: Vec<String>,
    uncovered: Vec<Mention>,
}

fn concept_coverage(c: &Claim, scope: &[&Fact], p: &PolicyConfig) -> Coverage {
    let mut tier = Tier::T2aParaphrase;
    let mut evidence: Vec<String> = Vec::new();
    let mut uncovered = Vec::new();
    for m in &c.mentions {
        let best = scope
            .iter()
            .filter_map(|f| {
                f.mentions
                    .iter()
                    .filter_map(|fm| mention_route(m, fm, p.synonym_rule))
                    .min()
                    .map(|t| (t, f.id.clone()))
            })
            .min_by_key(|(t, _)| *t);
        match best {
            Some((t, id)) => {
                tier = tier.max(t);
                if !evidence.contains(&id) {
                    evidence.push(id);
                }
            }
            None => uncovered.push(m.clone()),
        }
    }
    Coverage {
        tier,
        evidence,
        uncovered,
    }
}

fn derivable_kinds(c: &Claim, p: &PolicyConfig) -> Vec<RuleKind> {
    let mut kinds = Vec::new();
    if p.inference_rules {
        kinds.push(RuleKind::DiagnosticInference);
        if c.kind == ClaimKind::PlanAction {
            kinds.push(RuleKind::PlanGuideline);
        }
    }
    if p.summary_conventions && c.kind == ClaimKind::SummaryStatement {
        kinds.push(RuleKind::SummaryConvention);
    }
    kinds
}

/// Classifies one claim under a policy, recording the protocol trace.
pub fn classify_claim(
    c: &Claim,
    f: &FactBase,
    kb: &KnowledgeBase,
    p: &PolicyConfig,
) -> Result<Verdict, JudgeError> {
    if let Some(missing) = c.concepts.iter().find(|r| !kb.contains(&r.concept_id)) {
        return Err(JudgeError::InconsistentInputs {
            claim_id: c.id.clone(),
            concept_id: missing.concept_id.clone(),
        });
    }
    let mut trace = vec![step(1, format!("state claim: {}", c.text), StepOutcome::Matched)];
    let verdict = |tier: Tier, evidence: Vec<String>, rules: Vec<FiredRule>, trace: Vec<ProtocolStep>, reason: String| Verdict {
        claim_id: c.id.clone(),
        label: tier.label(),
        tier,
        evidence,
        rules,
        trace,
        policy: p.id,
        reason,
    };
    let floor = floor_check(c, f, kb);
    let scope_name = if p.cross_section {
        "all sections".to_string()
    } else {
        c.section.as_str().to_string()
    };
    let scope: Vec<&Fact> = f
        .facts
        .iter()
        .filter(|x| p.cross_section || x.section == c.section)
        .collect();

    // Step 2/3: direct statement, then concept-level paraphrase or synonym.
    let mut found: Option<(Tier, Vec<String>)> =
        lexical_match(&c.tokens, &scope).map(|x| (Tier::T1Direct, vec![x.id.clone()]));
    let mut coverage = None;
    if found.is_none() && p.id == PolicyId::Stage2InferenceAware && !c.mentions.is_empty() {
        let cov = concept_coverage(c, &scope, p);
        if cov.uncovered.is_empty() {
            found = Some((cov.tier, cov.evidence.clone()));
        }
        coverage = Some(cov);
    }

    let hallucinated = |mut trace: Vec<ProtocolStep>, evidence: Vec<String>, rules: Vec<FiredRule>, fallback: String| {
        let (tier, evidence, reason) = match &floor {
            Some(hit) => (hit.tier, hit.evidence.clone(), hit.reason.clone()),
            None => (Tier::T4Overreach, evidence, fallback),
        };
        trace.push(step(5, format!("hallucinated ({}): {reason}", tier.code()), StepOutcome::Terminal));
        verdict(tier, evidence, rules, trace, reason)
    };

    if let Some((tier, evidence)) = found {
        let how = match tier {
            Tier::T1Direct => "direct statement",
            Tier::T2bDrugSynonym => "trade/generic equivalent",
            _ => "paraphrase via shared concepts",
        };
        trace.push(step(2, format!("scan facts in {scope_name}: {how} in {}", evidence.join(", ")), StepOutcome::Matched));
        if floor.is_none() {
            trace.push(step(3, format!("supported at {}", tier.code()), StepOutcome::Terminal));
            return Ok(verdict(tier, evidence, Vec::new(), trace, String::new()));
        }
        if p.id == PolicyId::Stage2InferenceAware {
            trace.push(step(3, "safety floor overrides the match", StepOutcome::NotMatched));
        }
        return Ok(hallucinated(trace, evidence, Vec::new(), String::new()));
    }

    trace.push(step(2, format!("scan facts in {scope_name}: no grounding statement"), StepOutcome::NotMatched));
    if p.id == PolicyId::Stage1Strict {
        return Ok(hallucinated(trace, Vec::new(), Vec::new(), "not explicitly stated in the transcript".into()));
    }
    let Some(cov) = coverage else {
        return Ok(hallucinated(trace, Vec::new(), Vec::new(), "unresolvable content".into()));
    };

    // Step 4: derive each uncovered concept through a firing rule.
    let kinds = derivable_kinds(c, p);
    let rule_facts;
    let rule_base = if p.cross_section {
        f
    } else {
        rule_facts = FactBase {
            transcript_id: f.transcript_id.clone(),
            index: FactBase::build_index(&scope.iter().map(|x| (*x).clone()).collect::<Vec<_>>()),
            facts: scope.iter().map(|x| (*x).clone()).collect(),
        };
        &rule_facts
    };
    let mut rules = Vec::new();
    let mut evidence = cov.evidence.clone();
    let mut underived = Vec::new();
    for m in &cov.uncovered {
        let hits = if m.negated {
            Vec::new()
        } else {
            fired(kb, rule_base, &m.concept.concept_id, &kinds)
        };
        if hits.is_empty() {
            underived.push(m.concept.preferred_term.clone());
        }
        for (rule, ev) in hits {
            if !rules.contains(&rule) {
                rules.push(rule);
            }
            for id in ev {
                if !evidence.contains(&id) {
                    evidence.push(id);
                }
            }
        }
    }
    if underived.is_empty() && floor.is_none() {
        let ids: Vec<&str> = rules.iter().map(|r| r.rule_id.as_str()).collect();
        trace.push(step(4, format!("derived by rule {}", ids.join(", ")), StepOutcome::Terminal));
        return Ok(verdict(Tier::T3Inference, evidence, rules, trace, String::new()));
    }
    let why = if underived.is_empty() {
        "derivation blocked by the safety floor".to_string()
    } else {
        format!("no fact or firing rule for {}", underived.join(", "))
    };
    trace.push(step(4, why.clone(), StepOutcome::NotMatched));
    Ok(hallucinated(trace, Vec::new(), Vec::new(), format!("no inferential path: {why}")))
}

/// Extracts facts and claims, then judges every claim in note order.
pub fn judge_note_with(
    t: &Transcript,
    s: &SoapNote,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
    judge: &dyn ClaimJudge,
) -> Result<NoteReport, JudgeError> {
    let facts = extract_facts(t, kb, cfg)?;
    let claims = extract_claims(s, kb, cfg)?;
    judge_claims(&s.id, &claims, &facts, kb, judge)
}

pub fn judge_claims(
    note_id: &str,
    claims: &[Claim],
    facts: &FactBase,
    kb: &KnowledgeBase,
    judge: &dyn ClaimJudge,
) -> Result<NoteReport, JudgeError> {
    let verdicts = claims
        .iter()
        .map(|c| {
            let v = judge.judge(c, facts, kb)?;
            v.validate()?;
            Ok(v)
        })
        .collect::<Result<Vec<_>, JudgeError>>()?;
    Ok(NoteReport::new(note_id, judge.policy(), claims.to_vec(), verdicts))
}

/// Deterministic-engine evaluation of one transcript/note pair.
pub fn judge_note(
    t: &Transcript,
    s: &SoapNote,
    kb: &KnowledgeBase,
    cfg: &ExtractorConfig,
    p: &PolicyConfig,
) -> Result<NoteReport, JudgeError> {
    judge_note_with(t, s, kb, cfg, &DeterministicJudge::new(*p))
}
