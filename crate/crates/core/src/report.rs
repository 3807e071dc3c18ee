//! Aggregation of verdicts into hallucination rates, policy comparisons and
//! plot-ready output files.
//!
//! Mean rates are macro-averaged (per note, then averaged over notes); the
//! claim-weighted micro rate is reported alongside.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::RuleKind;
use crate::model::{
    check_format_version, Claim, FiredRule, Label, ModelError, PolicyId, ProtocolStep,
    SectionLabel, Tier, Verdict, FORMAT_MAJOR,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("corpora differ: {0}")]
    MismatchedCorpora(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Format(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteReport {
    pub note_id: String,
    pub policy: PolicyId,
    pub claims: Vec<Claim>,
    pub verdicts: Vec<Verdict>,
    pub rate: f64,
}

fn rate(flagged: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        flagged as f64 / total as f64
    }
}

impl NoteReport {
    pub fn new(note_id: &str, policy: PolicyId, claims: Vec<Claim>, verdicts: Vec<Verdict>) -> Self {
        let rate = rate(
            verdicts.iter().filter(|v| v.label == Label::Hallucinated).count(),
            verdicts.len(),
        );
        NoteReport {
            note_id: note_id.to_string(),
            policy,
            claims,
            verdicts,
            rate,
        }
    }

    pub fn hallucinated(&self) -> usize {
        self.verdicts
            .iter()
            .filter(|v| v.label == Label::Hallucinated)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub policy: PolicyId,
    pub note_reports: Vec<NoteReport>,
    pub mean_rate: f64,
    pub micro_rate: f64,
    pub tier_histogram: BTreeMap<Tier, usize>,
}

impl CorpusReport {
    pub fn new(policy: PolicyId, note_reports: Vec<NoteReport>) -> Self {
        let mean_rate = if note_reports.is_empty() {
            0.0
        } else {
            note_reports.iter().map(|n| n.rate).sum::<f64>() / note_reports.len() as f64
        };
        let claims: usize = note_reports.iter().map(|n| n.verdicts.len()).sum();
        let flagged: usize = note_reports.iter().map(NoteReport::hallucinated).sum();
        let mut tier_histogram: BTreeMap<Tier, usize> = Tier::ALL.iter().map(|t| (*t, 0)).collect();
        for v in note_reports.iter().flat_map(|n| &n.verdicts) {
            *tier_histogram.entry(v.tier).or_default() += 1;
        }
        CorpusReport {
            policy,
            note_reports,
            mean_rate,
            micro_rate: rate(flagged, claims),
            tier_histogram,
        }
    }

    pub fn claim_count(&self) -> usize {
        self.note_reports.iter().map(|n| n.verdicts.len()).sum()
    }

    pub fn summary(&self) -> SummaryRow {
        SummaryRow {
            policy: self.policy,
            notes: self.note_reports.len(),
            claims: self.claim_count(),
            hallucinated: self.note_reports.iter().map(NoteReport::hallucinated).sum(),
            mean_rate: self.mean_rate,
            micro_rate: self.micro_rate,
            tiers: Tier::ALL.map(|t| self.tier_histogram.get(&t).copied().unwrap_or(0)),
        }
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: PolicyId,
    pub notes: usize,
    pub claims: usize,
    pub hallucinated: usize,
    pub mean_rate: f64,
    pub micro_rate: f64,
    pub tiers: [usize; 6],
}

/// Why Stage 2 accepted a claim Stage 1 flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    DiagnosticInference,
    TerminologyTranslation,
    StandardOfCare,
    Other,
}

impl Pattern {
    /// Tags a Stage-2 Supported verdict by its reclassifying evidence.
    pub fn of(v: &Verdict) -> Pattern {
        let has = |k: RuleKind| v.rules.iter().any(|r| r.kind == k);
        if has(RuleKind::DiagnosticInference) {
            Pattern::DiagnosticInference
        } else if matches!(v.tier, Tier::T2aParaphrase | Tier::T2bDrugSynonym) {
            Pattern::TerminologyTranslation
        } else if has(RuleKind::PlanGuideline) || has(RuleKind::SummaryConvention) {
            Pattern::StandardOfCare
        } else {
            Pattern::Other
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reclassified {
    pub note_id: String,
    pub claim_id: String,
    pub claim_text: String,
    pub stage1_tier: Tier,
    pub stage2_tier: Tier,
    pub pattern: Pattern,
    pub rules: Vec<FiredRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub stage1: CorpusReport,
    pub stage2: CorpusReport,
    pub delta: f64,
    pub reclassified: Vec<Reclassified>,
}

impl ComparisonReport {
    pub fn pattern_counts(&self) -> BTreeMap<Pattern, usize> {
        let mut out = BTreeMap::new();
        for r in &self.reclassified {
            *out.entry(r.pattern).or_default() += 1;
        }
        out
    }
}

fn claim_keys(r: &CorpusReport) -> Vec<(String, Vec<String>)> {
    r.note_reports
        .iter()
        .map(|n| {
            (
                n.note_id.clone(),
                n.verdicts.iter().map(|v| v.claim_id.clone()).collect(),
            )
        })
        .collect()
}

/// Pairs two corpus reports over the same (note, claim) set.
pub fn build_comparison(s1: &CorpusReport, s2: &CorpusReport) -> Result<ComparisonReport, ReportError> {
    let (k1, k2) = (claim_keys(s1), claim_keys(s2));
    if k1 != k2 {
        let notes1: BTreeSet<&String> = k1.iter().map(|(n, _)| n).collect();
        let notes2: BTreeSet<&String> = k2.iter().map(|(n, _)| n).collect();
        let why = if notes1 != notes2 {
            let only: Vec<&&String> = notes1.symmetric_difference(&notes2).collect();
            format!("note sets differ ({only:?})")
        } else {
            "claim sets or order differ".to_string()
        };
        return Err(ReportError::MismatchedCorpora(why));
    }
    let mut reclassified = Vec::new();
    for (n1, n2) in s1.note_reports.iter().zip(&s2.note_reports) {
        for (i, (v1, v2)) in n1.verdicts.iter().zip(&n2.verdicts).enumerate() {
            if v1.label == Label::Hallucinated && v2.label == Label::Supported {
                reclassified.push(Reclassified {
                    note_id: n1.note_id.clone(),
                    claim_id: v1.claim_id.clone(),
                    claim_text: n2
                        .claims
                        .get(i)
                        .map(|c| c.text.clone())
                        .unwrap_or_default(),
                    stage1_tier: v1.tier,
                    stage2_tier: v2.tier,
                    pattern: Pattern::of(v2),
                    rules: v2.rules.clone(),
                });
            }
        }
    }
    Ok(ComparisonReport {
        stage1: s1.clone(),
        stage2: s2.clone(),
        delta: s1.mean_rate - s2.mean_rate,
        reclassified,
    })
}

// ---- emission ----

pub const SUMMARY_FILE: &str = "summary.tsv";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const SERIES_FILE: &str = "series.tsv";

const SUMMARY_HEADER: &str =
    "policy\tnotes\tclaims\thallucinated\tmean_rate\tmicro_rate\tT1\tT2a\tT2b\tT3\tT4\tT5";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedFiles {
    pub summary: PathBuf,
    pub audit: PathBuf,
    pub series: PathBuf,
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub format_version: String,
    pub policy: PolicyId,
    pub note_id: String,
    pub claim_id: String,
    pub claim_text: String,
    pub section: Option<SectionLabel>,
    pub label: Label,
    pub tier: Tier,
    pub evidence: Vec<String>,
    pub rules: Vec<FiredRule>,
    pub trace: Vec<ProtocolStep>,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Pattern>,
}

fn summary_line(out: &mut String, row: &SummaryRow) {
    let _ = write!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}",
        row.policy.short(),
        row.notes,
        row.claims,
        row.hallucinated,
        row.mean_rate,
        row.micro_rate
    );
    for t in row.tiers {
        let _ = write!(out, "\t{t}");
    }
    out.push('\n');
}

pub fn render_summary(rows: &[SummaryRow], delta: Option<f64>) -> String {
    let mut out = format!("#format-version: {FORMAT_MAJOR}\n{SUMMARY_HEADER}\n");
    for row in rows {
        summary_line(&mut out, row);
    }
    if let Some(d) = delta {
        let _ = writeln!(out, "#delta: {d}");
    }
    out
}

/// Parses a summary table back into rows and the optional delta.
pub fn parse_summary(text: &str) -> Result<(Vec<SummaryRow>, Option<f64>), ReportError> {
    let bad = |line: usize, reason: String| ReportError::Malformed {
        file: SUMMARY_FILE.into(),
        line,
        reason,
    };
    let mut rows = Vec::new();
    let mut delta = None;
    let mut saw_version = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(v) = line.strip_prefix("#format-version:") {
            check_format_version(v.trim())?;
            saw_version = true;
            continue;
        }
        if let Some(d) = line.strip_prefix("#delta:") {
            delta = Some(d.trim().parse().map_err(|_| bad(lineno, "bad delta".into()))?);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() || line == SUMMARY_HEADER {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 12 {
            return Err(bad(lineno, format!("expected 12 columns, found {}", cols.len())));
        }
        let num = |i: usize| -> Result<usize, ReportError> {
            cols[i].parse().map_err(|_| bad(lineno, format!("column {} is not a count", i + 1)))
        };
        let real = |i: usize| -> Result<f64, ReportError> {
            cols[i].parse().map_err(|_| bad(lineno, format!("column {} is not a number", i + 1)))
        };
        let mut tiers = [0; 6];
        for (k, slot) in tiers.iter_mut().enumerate() {
            *slot = num(6 + k)?;
        }
        rows.push(SummaryRow {
            policy: cols[0].parse().map_err(|_| bad(lineno, format!("unknown policy {}", cols[0])))?,
            notes: num(1)?,
            claims: num(2)?,
            hallucinated: num(3)?,
            mean_rate: real(4)?,
            micro_rate: real(5)?,
            tiers,
        });
    }
    if !saw_version {
        return Err(bad(1, "missing format-version".into()));
    }
    Ok((rows, delta))
}

fn audit_lines(out: &mut String, report: &CorpusReport, patterns: &BTreeMap<(&str, &str), Pattern>) {
    for n in &report.note_reports {
        for (i, v) in n.verdicts.iter().enumerate() {
            let claim = n.claims.get(i);
            let record = AuditRecord {
                format_version: FORMAT_MAJOR.to_string(),
                policy: report.policy,
                note_id: n.note_id.clone(),
                claim_id: v.claim_id.clone(),
                claim_text: claim.map(|c| c.text.clone()).unwrap_or_default(),
                section: claim.map(|c| c.section),
                label: v.label,
                tier: v.tier,
                evidence: v.evidence.clone(),
                rules: v.rules.clone(),
                trace: v.trace.clone(),
                reason: v.reason.clone(),
                pattern: patterns.get(&(n.note_id.as_str(), v.claim_id.as_str())).copied(),
            };
            out.push_str(&serde_json::to_string(&record).expect("audit record serializes"));
            out.push('\n');
        }
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes summary, audit log and per-note rate series for one policy run.
pub fn emit_corpus(report: &CorpusReport, dir: &Path) -> Result<EmittedFiles, ReportError> {
    ensure_dir(dir)?;
    let summary = render_summary(&[report.summary()], None);
    let mut audit = String::new();
    audit_lines(&mut audit, report, &BTreeMap::new());
    let mut series = format!("#format-version: {FORMAT_MAJOR}\nnote_id\tclaims\trate\n");
    for n in &report.note_reports {
        let _ = writeln!(series, "{}\t{}\t{}", n.note_id, n.verdicts.len(), n.rate);
    }
    Ok(EmittedFiles {
        summary: write(dir, SUMMARY_FILE, &summary)?,
        audit: write(dir, AUDIT_FILE, &audit)?,
        series: write(dir, SERIES_FILE, &series)?,
    })
}

/// Writes both policies' summaries plus the delta, a combined audit log with
/// reclassification patterns, and a paired per-note rate series.
pub fn emit_comparison(report: &ComparisonReport, dir: &Path) -> Result<EmittedFiles, ReportError> {
    ensure_dir(dir)?;
    let summary = render_summary(
        &[report.stage1.summary(), report.stage2.summary()],
        Some(report.delta),
    );
    let patterns: BTreeMap<(&str, &str), Pattern> = report
        .reclassified
        .iter()
        .map(|r| ((r.note_id.as_str(), r.claim_id.as_str()), r.pattern))
        .collect();
    let mut audit = String::new();
    audit_lines(&mut audit, &report.stage1, &BTreeMap::new());
    audit_lines(&mut audit, &report.stage2, &patterns);
    let mut series =
        format!("#format-version: {FORMAT_MAJOR}\nnote_id\tclaims\tstage1_rate\tstage2_rate\n");
    for (a, b) in report.stage1.note_reports.iter().zip(&report.stage2.note_reports) {
        let _ = writeln!(series, "{}\t{}\t{}\t{}", a.note_id, a.verdicts.len(), a.rate, b.rate);
    }
    Ok(EmittedFiles {
        summary: write(dir, SUMMARY_FILE, &summary)?,
        audit: write(dir, AUDIT_FILE, &audit)?,
        series: write(dir, SERIES_FILE, &series)?,
    })
}

/// External (human) judgments imported from a `note_id, claim_id, label`
/// table. Kept separate from [`CorpusReport`], which always carries engine
/// verdicts with tiers and traces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HumanBaseline {
    pub labels: BTreeMap<String, Vec<(String, Label)>>,
}

impl HumanBaseline {
    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut labels: BTreeMap<String, Vec<(String, Label)>> = BTreeMap::new();
        let bad = |line: usize, reason: String| ReportError::Malformed {
            file: "annotations".into(),
            line,
            reason,
        };
        for (i, line) in text.lines().enumerate() {
            if let Some(v) = line.strip_prefix("#format-version:") {
                check_format_version(v.trim())?;
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() || line.starts_with("note_id\t") {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [note, claim, label] = cols[..] else {
                return Err(bad(i + 1, "expected note_id, claim_id, label".into()));
            };
            let label: Label = label
                .parse()
                .map_err(|_| bad(i + 1, format!("unknown label {label:?}")))?;
            labels
                .entry(note.to_string())
                .or_default()
                .push((claim.to_string(), label));
        }
        Ok(HumanBaseline { labels })
    }

    pub fn note_rates(&self) -> BTreeMap<&str, f64> {
        self.labels
            .iter()
            .map(|(note, ls)| {
                let flagged = ls.iter().filter(|(_, l)| *l == Label::Hallucinated).count();
                (note.as_str(), rate(flagged, ls.len()))
            })
            .collect()
    }

    pub fn mean_rate(&self) -> f64 {
        let rates = self.note_rates();
        if rates.is_empty() {
            0.0
        } else {
            rates.values().sum::<f64>() / rates.len() as f64
        }
    }

    /// Fraction of commonly labeled claims on which the engine agrees.
    pub fn agreement(&self, report: &CorpusReport) -> Option<f64> {
        let mut both = 0;
        let mut agree = 0;
        for n in &report.note_reports {
            let Some(ls) = self.labels.get(&n.note_id) else {
                continue;
            };
            for v in &n.verdicts {
                if let Some((_, l)) = ls.iter().find(|(c, _)| *c == v.claim_id) {
                    both += 1;
                    agree += usize::from(*l == v.label);
                }
            }
        }
        (both > 0).then(|| agree as f64 / both as f64)
    }
}
