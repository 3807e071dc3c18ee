//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use clinjudge::backend::{BackendError, BackendJudge, Endpoint, HttpConfig, HttpEndpoint, MockEndpoint, Recorder, Session};
use clinjudge::judge::{judge_note_with, ClaimJudge, DeterministicJudge, JudgeError, PolicyConfig};
use clinjudge::report::{build_comparison, emit_comparison, emit_corpus, CorpusReport, NoteReport, Pattern};
use clinjudge::synth::{self, CorpusEntry};
use clinjudge::{parse_soap_note, parse_transcript, ExtractorConfig, KnowledgeBase, PolicyId};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(name = "clinjudge", version, about = "Judge SOAP note claims against source transcripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate knowledge-base tables and write a single bundle file.
    IngestKb(IngestArgs),
    /// Judge notes under one policy and write summary, audit and series files.
    Evaluate(EvalArgs),
    /// Judge notes under both policies and write the comparison.
    Compare(CompareArgs),
    /// Generate a synthetic corpus with planted claim tiers.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding concepts.tsv, drugs.tsv and rules.tsv.
    #[arg(long, conflicts_with_all = ["concepts", "drugs", "rules"])]
    dir: Option<PathBuf>,
    #[arg(long, requires_all = ["drugs", "rules"])]
    concepts: Option<PathBuf>,
    #[arg(long)]
    drugs: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Bundle file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Det,
    Mock,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Stage1,
    Stage2,
}

#[derive(Args)]
struct InputArgs {
    /// Knowledge-base bundle (JSON) or directory of tables; the bundled seed KB when omitted.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Transcript file (with --note).
    #[arg(long, requires = "note", conflicts_with = "corpus")]
    transcript: Option<PathBuf>,
    /// SOAP note file (with --transcript).
    #[arg(long, requires = "transcript")]
    note: Option<PathBuf>,
    /// Corpus directory with a manifest.tsv.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "det")]
    backend: Backend,
    /// Scripted session file for the mock backend.
    #[arg(long)]
    session: Option<PathBuf>,
    /// Completion URL for the external backend; the credential comes from CLINJUDGE_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    /// Write every backend response to this session file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Worker threads for per-note evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value = "stage2")]
    policy: PolicyArg,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Built-in template set: paper-like or balanced.
    #[arg(long, default_value = "paper-like", conflicts_with = "templates")]
    preset: String,
    /// Directory of *.tmpl files to use instead of a preset.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Bad invocation (as opposed to bad data).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<BackendError>() || matches!(cause.downcast_ref::<JudgeError>(), Some(JudgeError::Backend(_))) {
            return EXIT_BACKEND;
        }
    }
    EXIT_DATA
}

fn load_kb(path: Option<&Path>) -> Result<KnowledgeBase> {
    let Some(path) = path else {
        return Ok(KnowledgeBase::seed());
    };
    if !path.exists() {
        return Err(usage(format!("knowledge base {} does not exist", path.display())));
    }
    if path.is_dir() {
        return KnowledgeBase::ingest_files(
            &path.join("concepts.tsv"),
            &path.join("drugs.tsv"),
            &path.join("rules.tsv"),
        )
        .with_context(|| format!("loading knowledge base tables from {}", path.display()));
    }
    let json = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    KnowledgeBase::from_bundle_json(&json).with_context(|| format!("loading bundle {}", path.display()))
}

fn load_inputs(args: &InputArgs) -> Result<Vec<CorpusEntry>> {
    match (&args.transcript, &args.note, &args.corpus) {
        (Some(t), Some(n), None) => {
            let read = |p: &Path| {
                if !p.exists() {
                    return Err(usage(format!("input {} does not exist", p.display())));
                }
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
            };
            let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let transcript = parse_transcript(&read(t)?, &stem(t)).with_context(|| format!("parsing {}", t.display()))?;
            let note = parse_soap_note(&read(n)?, &stem(n)).with_context(|| format!("parsing {}", n.display()))?;
            Ok(vec![CorpusEntry {
                case_id: note.id.clone(),
                transcript,
                note,
            }])
        }
        (None, None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(usage(format!("corpus directory {} does not exist", dir.display())));
            }
            Ok(synth::read_corpus(dir)?)
        }
        _ => Err(usage("give either --transcript with --note, or --corpus")),
    }
}

fn endpoint(args: &InputArgs) -> Result<Option<Box<dyn Endpoint>>> {
    Ok(match args.backend {
        Backend::Det => {
            if args.session.is_some() || args.endpoint.is_some() || args.record.is_some() {
                return Err(usage("--session, --endpoint and --record need --backend mock or external"));
            }
            None
        }
        Backend::Mock => {
            let path = args.session.as_ref().ok_or_else(|| usage("--backend mock needs --session"))?;
            if !path.exists() {
                return Err(usage(format!("session {} does not exist", path.display())));
            }
            Some(Box::new(MockEndpoint::new(Session::load(path)?)))
        }
        Backend::External => {
            let url = args.endpoint.as_ref().ok_or_else(|| usage("--backend external needs --endpoint"))?;
            Some(Box::new(HttpEndpoint::from_env(HttpConfig::new(url.clone()))?))
        }
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn run_policy(
    entries: &[CorpusEntry],
    kb: &KnowledgeBase,
    judge: &dyn ClaimJudge,
    pool: &rayon::ThreadPool,
) -> Result<CorpusReport> {
    let cfg = ExtractorConfig::default();
    let reports: Vec<NoteReport> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                judge_note_with(&e.transcript, &e.note, kb, &cfg, judge)
                    .with_context(|| format!("judging {}", e.case_id))
            })
            .collect::<Result<_>>()
    })?;
    Ok(CorpusReport::new(judge.policy(), reports))
}

/// Runs each policy with either the deterministic engine or the configured
/// backend, recording responses when asked.
fn run_policies(args: &InputArgs, policies: &[PolicyId]) -> Result<Vec<CorpusReport>> {
    let kb = load_kb(args.kb.as_deref())?;
    let entries = load_inputs(args)?;
    let pool = pool(args.jobs)?;
    let ep = endpoint(args)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let Some(ep) = ep else {
        return policies
            .iter()
            .map(|p| run_policy(&entries, &kb, &DeterministicJudge::new(PolicyConfig::for_policy(*p)), &pool))
            .collect();
    };
    let recorder = Recorder::new(ep);
    let reports = policies
        .iter()
        .map(|p| run_policy(&entries, &kb, &BackendJudge::new(&recorder, PolicyConfig::for_policy(*p)), &pool))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &args.record {
        recorder.session().save(path)?;
    }
    Ok(reports)
}

fn cmd_ingest_kb(args: IngestArgs) -> Result<()> {
    let (c, d, r) = match (&args.dir, &args.concepts, &args.drugs, &args.rules) {
        (Some(dir), None, None, None) => (dir.join("concepts.tsv"), dir.join("drugs.tsv"), dir.join("rules.tsv")),
        (None, Some(c), Some(d), Some(r)) => (c.clone(), d.clone(), r.clone()),
        _ => return Err(usage("give --dir, or all of --concepts, --drugs and --rules")),
    };
    for p in [&c, &d, &r] {
        if !p.exists() {
            return Err(usage(format!("input {} does not exist", p.display())));
        }
    }
    let kb = KnowledgeBase::ingest_files(&c, &d, &r)?;
    std::fs::write(&args.out, kb.to_bundle_json()).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} concepts, {} drug equivalences, {} rules -> {}",
        kb.concepts().len(),
        kb.drug_equivalences().len(),
        kb.rules().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let policy = match args.policy {
        PolicyArg::Stage1 => PolicyId::Stage1Strict,
        PolicyArg::Stage2 => PolicyId::Stage2InferenceAware,
    };
    let report = run_policies(&args.input, &[policy])?.remove(0);
    emit_corpus(&report, &args.input.out)?;
    println!(
        "{}: {} notes, {} claims, mean rate {:.4}, micro rate {:.4}",
        report.policy,
        report.note_reports.len(),
        report.claim_count(),
        report.mean_rate,
        report.micro_rate
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut reports = run_policies(&args.input, &[PolicyId::Stage1Strict, PolicyId::Stage2InferenceAware])?;
    let s2 = reports.pop().expect("two reports");
    let s1 = reports.pop().expect("two reports");
    let cmp = build_comparison(&s1, &s2)?;
    emit_comparison(&cmp, &args.input.out)?;
    println!(
        "stage1 mean {:.4}, stage2 mean {:.4}, delta {:.4}, reclassified {}",
        cmp.stage1.mean_rate,
        cmp.stage2.mean_rate,
        cmp.delta,
        cmp.reclassified.len()
    );
    for (pattern, n) in cmp.pattern_counts() {
        let name = match pattern {
            Pattern::DiagnosticInference => "diagnostic inference",
            Pattern::TerminologyTranslation => "terminology translation",
            Pattern::StandardOfCare => "standard of care",
            Pattern::Other => "other",
        };
        println!("  {name}: {n}");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let kb = load_kb(args.kb.as_deref())?;
    let templates = match &args.templates {
        Some(dir) if !dir.is_dir() => return Err(usage(format!("template directory {} does not exist", dir.display()))),
        Some(dir) => synth::load_templates(dir)?,
        None => match synth::preset(&args.preset) {
            Err(e @ synth::SynthError::UnknownPreset(_)) => return Err(usage(e.to_string())),
            other => other?,
        },
    };
    if templates.is_empty() {
        bail!("no templates to generate from");
    }
    let corpus = pool(args.jobs)?.install(|| synth::generate_corpus(&templates, &kb, args.cases, args.seed))?;
    let label = args
        .templates
        .as_ref()
        .map(|d| d.display().to_string())
        .unwrap_or(args.preset.clone());
    synth::write_corpus(&args.out, &corpus, &label, args.seed)?;
    let (s1, s2) = synth::oracle_rates(&corpus);
    println!(
        "{} cases -> {}; oracle stage1 {:.4}, stage2 {:.4}",
        corpus.len(),
        args.out.display(),
        s1,
        s2
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::IngestKb(a) => cmd_ingest_kb(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
