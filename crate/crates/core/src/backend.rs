//! Language-model backends: prompt rendering, the constrained response
//! grammar, an HTTP endpoint, and a scripted mock with session recording.
//!
//! The external credential is read from the `CLINJUDGE_API_KEY` environment
//! variable only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{classify_claim, floor_check, ClaimJudge, JudgeError, PolicyConfig};
use crate::kb::{retrieve_context, KnowledgeBase, RetrievedEntry};
use crate::model::{
    check_format_version, Claim, FactBase, Label, PolicyId, ProtocolStep, StepOutcome, Tier,
    Verdict, FORMAT_MAJOR,
};

/// Environment variable holding the external endpoint credential.
pub const API_KEY_ENV: &str = "CLINJUDGE_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unparseable response for {request_id}: {reason}")]
    Parse { request_id: String, reason: String },
    #[error("endpoint rejected credentials: {0}")]
    Auth(String),
    #[error("credential variable {API_KEY_ENV} is not set")]
    MissingCredential,
    #[error("session has no scripted response for {0}")]
    MissingScript(String),
    #[error("session file {path}: {reason}")]
    Session { path: String, reason: String },
}

const STAGE1_INSTRUCTIONS: &str = "You are a medical fact checker. For each claim in the SOAP note, determine whether it is explicitly supported by the patient physician conversation transcript. If the claim contains information that was not directly stated in the conversation, mark it as HALLUCINATED.";

const STAGE2_INSTRUCTIONS: &str = "You are a clinical documentation expert and medical AI evaluator. When assessing SOAP note claims against the source transcript, apply the following criteria: A claim is SUPPORTED if it is (a) directly stated in the transcript, (b) a paraphrase or medical terminology equivalent of stated information, or (c) a medically reasonable inference that a trained clinician would draw from the presented symptom picture. A claim is HALLUCINATED only if it (a) introduces information with no basis in the transcript and cannot be reasonably inferred, or (b) directly contradicts information stated in the transcript.";

const FORMAT_INSTRUCTION: &str = "Respond with SUPPORTED or HALLUCINATED alone on the first line, followed by a brief rationale on the following lines.";

pub const NO_RETRIEVAL_MARKER: &str = "no knowledge-base entries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub policy: PolicyId,
    pub prompt: String,
    pub claim: Claim,
    pub facts: String,
    /// Present for Stage 2 only.
    pub retrieved: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub label: Label,
    pub rationale: String,
    pub raw: String,
}

/// One fact per line: `[id] (Section, Polarity) text`.
pub fn serialize_facts(facts: &FactBase) -> String {
    let mut out = String::new();
    for f in &facts.facts {
        let _ = writeln!(out, "[{}] ({}, {:?}) {}", f.id, f.section, f.polarity, f.raw);
    }
    out
}

pub fn serialize_retrieved(entries: &[RetrievedEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = match e {
            RetrievedEntry::Concept(c) => writeln!(
                out,
                "concept {} \"{}\" ({:?}); synonyms: {}",
                c.id(),
                c.reference.preferred_term,
                c.semantic_type,
                c.synonyms.iter().cloned().collect::<Vec<_>>().join(", ")
            ),
            RetrievedEntry::DrugEquivalence(d) => writeln!(
                out,
                "drug equivalence {} \"{}\" = {}",
                d.generic.concept_id,
                d.generic.preferred_term,
                d.trade_names.iter().cloned().collect::<Vec<_>>().join(", ")
            ),
            RetrievedEntry::Rule(r) => writeln!(
                out,
                "rule {} ({}): at least {} of [{}] => {}",
                r.rule_id,
                r.kind,
                r.min_match,
                r.antecedents
                    .iter()
                    .map(|a| a.preferred_term.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
                r.consequent.preferred_term
            ),
        };
    }
    out
}

/// Deterministic prompt for one claim.
pub fn render_prompt(policy: PolicyId, claim: &Claim, facts: &str, retrieved: Option<&str>) -> String {
    let mut out = String::new();
    out.push_str(match policy {
        PolicyId::Stage1Strict => STAGE1_INSTRUCTIONS,
        PolicyId::Stage2InferenceAware => STAGE2_INSTRUCTIONS,
    });
    out.push_str("\n\nTranscript facts:\n");
    out.push_str(facts);
    let _ = write!(out, "\nClaim ({}): {}\n", claim.section, claim.text);
    if policy == PolicyId::Stage2InferenceAware {
        out.push_str("\nRetrieved clinical knowledge:\n");
        match retrieved {
            Some(r) if !r.trim().is_empty() => out.push_str(r),
            _ => {
                out.push_str(NO_RETRIEVAL_MARKER);
                out.push('\n');
            }
        }
    }
    out.push('\n');
    out.push_str(FORMAT_INSTRUCTION);
    out
}

pub fn build_request(policy: PolicyId, claim: &Claim, facts: &FactBase, kb: &KnowledgeBase) -> JudgeRequest {
    let facts_text = serialize_facts(facts);
    let retrieved = (policy == PolicyId::Stage2InferenceAware)
        .then(|| serialize_retrieved(&retrieve_context(claim, kb)));
    JudgeRequest {
        policy,
        prompt: render_prompt(policy, claim, &facts_text, retrieved.as_deref()),
        claim: claim.clone(),
        facts: facts_text,
        retrieved,
    }
}

/// Parses the response grammar: first line exactly `SUPPORTED` or
/// `HALLUCINATED` (surrounding whitespace ignored), rest is rationale.
pub fn parse_response(request_id: &str, raw: &str) -> Result<BackendResponse, BackendError> {
    let (first, rest) = raw.split_once('\n').unwrap_or((raw, ""));
    let label = match first.trim() {
        "SUPPORTED" => Label::Supported,
        "HALLUCINATED" => Label::Hallucinated,
        other => {
            return Err(BackendError::Parse {
                request_id: request_id.to_string(),
                reason: format!("first line {other:?} is not SUPPORTED or HALLUCINATED"),
            })
        }
    };
    Ok(BackendResponse {
        label,
        rationale: rest.trim().to_string(),
        raw: raw.to_string(),
    })
}

/// A completion service taking one prompt per request.
pub trait Endpoint: Send + Sync {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String, BackendError>;
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(request_id, prompt)
    }
}

/// Session key for a claim request under a policy.
pub fn request_key(policy: PolicyId, claim_id: &str) -> String {
    format!("{}:{claim_id}", policy.short())
}

pub fn submit(req: &JudgeRequest, endpoint: &dyn Endpoint) -> Result<BackendResponse, BackendError> {
    let key = request_key(req.policy, &req.claim.id);
    let raw = endpoint.complete(&key, &req.prompt)?;
    parse_response(&key, &raw)
}

/// Scripted responses keyed by request id; the mock replays it and the
/// recorder writes it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Session {
    pub format_version: String,
    pub responses: BTreeMap<String, String>,
}

impl Session {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Session {
            format_version: FORMAT_MAJOR.to_string(),
            responses,
        }
    }

    /// Scripts responses that reproduce the given verdicts.
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> Self {
        Session::new(
            verdicts
                .into_iter()
                .map(|v| {
                    let first = match v.label {
                        Label::Supported => "SUPPORTED",
                        Label::Hallucinated => "HALLUCINATED",
                    };
                    let why = if v.reason.is_empty() { v.tier.code() } else { &v.reason };
                    (request_key(v.policy, &v.claim_id), format!("{first}\n{why}"))
                })
                .collect(),
        )
    }

    pub fn from_json(json: &str, path: &str) -> Result<Self, BackendError> {
        let s: Session = serde_json::from_str(json).map_err(|e| BackendError::Session {
            path: path.to_string(),
            reason: e.to_string(),
        })?;
        check_format_version(&s.format_version).map_err(|e| BackendError::Session {
            path: path.to_string(),
            reason: e.to_string(),
        })?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Session {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        std::fs::write(path, self.to_json()).map_err(|e| BackendError::Session {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Offline endpoint answering from a session.
#[derive(Debug, Clone)]
pub struct MockEndpoint {
    session: Session,
}

impl MockEndpoint {
    pub fn new(session: Session) -> Self {
        MockEndpoint { session }
    }
}

impl Endpoint for MockEndpoint {
    fn complete(&self, request_id: &str, _prompt: &str) -> Result<String, BackendError> {
        self.session
            .responses
            .get(request_id)
            .cloned()
            .ok_or_else(|| BackendError::MissingScript(request_id.to_string()))
    }
}

/// Wraps an endpoint and keeps every raw response for later replay.
pub struct Recorder<E> {
    inner: E,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl<E: Endpoint> Recorder<E> {
    pub fn new(inner: E) -> Self {
        Recorder {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn session(&self) -> Session {
        Session::new(self.recorded.lock().expect("recorder lock").clone())
    }
}

impl<E: Endpoint> Endpoint for Recorder<E> {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String, BackendError> {
        let raw = self.inner.complete(request_id, prompt)?;
        self.recorded
            .lock()
            .expect("recorder lock")
            .insert(request_id.to_string(), raw.clone());
        Ok(raw)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub url: String,
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        HttpConfig {
            url: url.into(),
            retries: 3,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
        }
    }
}

/// JSON-over-HTTP completion endpoint. Sends `{"id", "prompt"}` with a
/// bearer credential; accepts a JSON body with `text` or `completion`, or a
/// plain-text body.
pub struct HttpEndpoint {
    config: HttpConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct CompletionBody {
    text: Option<String>,
    completion: Option<String>,
}

impl HttpEndpoint {
    /// Reads the credential from the environment.
    pub fn from_env(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| BackendError::MissingCredential)?;
        Self::with_key(config, api_key)
    }

    fn with_key(config: HttpConfig, api_key: String) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpEndpoint {
            config,
            api_key,
            client,
        })
    }

    fn attempt(&self, request_id: &str, prompt: &str) -> Result<String, Attempt> {
        let resp = self
            .client
            .post(&self.config.url)
            .bearer_auth(&self.api_key)
            .json(&serde_json::json!({ "id": request_id, "prompt": prompt }))
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Attempt::Fatal(BackendError::Auth(status.to_string())));
        }
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Transport {
                attempts: 1,
                message: format!("server returned {status}"),
            }));
        }
        let body = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        Ok(match serde_json::from_str::<CompletionBody>(&body) {
            Ok(CompletionBody { text: Some(t), .. }) | Ok(CompletionBody { completion: Some(t), .. }) => t,
            _ => body,
        })
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl Endpoint for HttpEndpoint {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String, BackendError> {
        let mut delay = self.config.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request_id, prompt) {
                Ok(body) => return Ok(body),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) if attempts > self.config.retries => {
                    return Err(BackendError::Transport { attempts, message })
                }
                Err(Attempt::Retry(_)) => {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}

/// Judges claims through a model endpoint. When the model agrees with the
/// deterministic engine the engine's verdict (tier, evidence, trace) is kept;
/// otherwise a model Supported becomes T3 and a model Hallucinated becomes
/// T4. The safety floor still overrides any Supported outcome.
pub struct BackendJudge<'a> {
    pub endpoint: &'a dyn Endpoint,
    pub config: PolicyConfig,
}

impl<'a> BackendJudge<'a> {
    pub fn new(endpoint: &'a dyn Endpoint, config: PolicyConfig) -> Self {
        BackendJudge { endpoint, config }
    }
}

impl ClaimJudge for BackendJudge<'_> {
    fn policy(&self) -> PolicyId {
        self.config.id
    }

    fn judge(&self, claim: &Claim, facts: &FactBase, kb: &KnowledgeBase) -> Result<Verdict, JudgeError> {
        let engine = classify_claim(claim, facts, kb, &self.config)?;
        let req = build_request(self.config.id, claim, facts, kb);
        let resp = submit(&req, self.endpoint)?;
        if resp.label == engine.label {
            return Ok(engine);
        }
        let first = ProtocolStep {
            step_number: 1,
            description: format!("state claim: {}", claim.text),
            outcome: StepOutcome::Matched,
        };
        let rationale = if resp.rationale.is_empty() {
            "no rationale given".to_string()
        } else {
            resp.rationale.clone()
        };
        let floor = floor_check(claim, facts, kb);
        let (tier, evidence, reason, step_number) = match (resp.label, floor) {
            (Label::Supported, None) => (Tier::T3Inference, engine.evidence.clone(), String::new(), 4),
            (Label::Supported, Some(hit)) => (hit.tier, hit.evidence, hit.reason, 5),
            (Label::Hallucinated, _) => (Tier::T4Overreach, Vec::new(), format!("backend: {rationale}"), 5),
        };
        Ok(Verdict {
            claim_id: claim.id.clone(),
            label: tier.label(),
            tier,
            evidence,
            rules: Vec::new(),
            trace: vec![
                first,
                ProtocolStep {
                    step_number,
                    description: format!("backend judged {:?}: {rationale}", resp.label),
                    outcome: StepOutcome::Terminal,
                },
            ],
            policy: self.config.id,
            reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{make_claim, ExtractorConfig};
    use crate::model::SectionLabel;

    fn claim(text: &str) -> Claim {
        make_claim("n:C001".into(), SectionLabel::Assessment, text, &KnowledgeBase::seed(), &ExtractorConfig::default())
    }

    #[test]
    fn stage_prompts_embed_their_instructions() {
        let c = claim("Diagnosis: GERD");
        let p1 = render_prompt(PolicyId::Stage1Strict, &c, "", None);
        assert!(p1.contains("mark it as HALLUCINATED"));
        assert!(!p1.contains("Retrieved clinical knowledge"));
        let p2 = render_prompt(PolicyId::Stage2InferenceAware, &c, "", None);
        assert!(p2.contains("medically reasonable inference that a trained clinician would draw"));
        assert!(p2.contains(NO_RETRIEVAL_MARKER));
    }

    #[test]
    fn rendering_is_pure() {
        let kb = KnowledgeBase::seed();
        let fb = FactBase::new("t", vec![]).unwrap();
        let c = claim("Diagnosis: GERD");
        let a = build_request(PolicyId::Stage2InferenceAware, &c, &fb, &kb);
        let b = build_request(PolicyId::Stage2InferenceAware, &c, &fb, &kb);
        assert_eq!(a, b);
        assert!(a.retrieved.as_deref().unwrap().contains("dx.gerd"));
        assert!(build_request(PolicyId::Stage1Strict, &c, &fb, &kb).retrieved.is_none());
    }

    #[test]
    fn response_grammar() {
        let r = parse_response("x", "SUPPORTED\nbecause").unwrap();
        assert_eq!((r.label, r.rationale.as_str()), (Label::Supported, "because"));
        assert_eq!(parse_response("x", "HALLUCINATED").unwrap().label, Label::Hallucinated);
        assert!(matches!(parse_response("x", "Supported, probably"), Err(BackendError::Parse { .. })));
        assert!(matches!(parse_response("x", ""), Err(BackendError::Parse { .. })));
    }

    #[test]
    fn mock_replays_and_reports_missing_scripts() {
        let mut responses = BTreeMap::new();
        responses.insert("stage2:n:C001".to_string(), "SUPPORTED\nok".to_string());
        let mock = MockEndpoint::new(Session::new(responses));
        assert_eq!(mock.complete("stage2:n:C001", "").unwrap(), "SUPPORTED\nok");
        assert!(matches!(mock.complete("stage2:n:C002", ""), Err(BackendError::MissingScript(_))));
    }

    #[test]
    fn recorder_captures_session() {
        let mut responses = BTreeMap::new();
        responses.insert("k".to_string(), "HALLUCINATED\nno".to_string());
        let rec = Recorder::new(MockEndpoint::new(Session::new(responses.clone())));
        rec.complete("k", "p").unwrap();
        let s = rec.session();
        assert_eq!(s.responses, responses);
        assert_eq!(Session::from_json(&s.to_json(), "mem").unwrap(), s);
    }

    #[test]
    fn disagreement_keeps_backend_label_unless_floored() {
        let kb = KnowledgeBase::seed();
        let cfg = ExtractorConfig::default();
        let t = crate::model::parse_transcript(
            "Doctor: What brings you in?\nPatient: I have heartburn after meals.",
            "t",
        )
        .unwrap();
        let facts = crate::extract::extract_facts(&t, &kb, &cfg).unwrap();
        let mk = |id: &str, section, text| make_claim(format!("n:{id}"), section, text, &kb, &cfg);
        let claims = [
            mk("C001", SectionLabel::Subjective, "Heartburn after meals"),
            mk("C002", SectionLabel::Subjective, "Reports chest tightness"),
            mk("C003", SectionLabel::Plan, "Start metformin 500 mg daily"),
        ];
        let mut responses = BTreeMap::new();
        responses.insert("stage2:n:C001".to_string(), "HALLUCINATED\nnot in transcript".to_string());
        responses.insert("stage2:n:C002".to_string(), "SUPPORTED\nplausible".to_string());
        responses.insert("stage2:n:C003".to_string(), "SUPPORTED\nstandard care".to_string());
        let mock = MockEndpoint::new(Session::new(responses));
        let judge = BackendJudge::new(&mock, PolicyConfig::stage2());
        let v: Vec<Verdict> = claims.iter().map(|c| judge.judge(c, &facts, &kb).unwrap()).collect();
        for x in &v {
            x.validate().unwrap();
        }
        assert_eq!((v[0].tier, v[0].reason.as_str()), (Tier::T4Overreach, "backend: not in transcript"));
        assert_eq!(v[1].tier, Tier::T3Inference);
        // An unstated medication stays hallucinated whatever the backend says.
        assert_eq!(v[2].label, Label::Hallucinated);
        assert_eq!(v[2].tier, Tier::T4Overreach);
    }

    #[test]
    fn session_rejects_unknown_major_version() {
        let json = r#"{"format_version":"2","responses":{}}"#;
        assert!(matches!(Session::from_json(json, "mem"), Err(BackendError::Session { .. })));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error_after_retries() {
        let mut cfg = HttpConfig::new("http://127.0.0.1:9/complete");
        cfg.retries = 2;
        cfg.backoff = Duration::from_millis(1);
        cfg.timeout = Duration::from_secs(2);
        let ep = HttpEndpoint::with_key(cfg, "test".into()).unwrap();
        match ep.complete("k", "p") {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
