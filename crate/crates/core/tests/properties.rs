//! Property tests for invariants across modules.

use proptest::prelude::*;

use clinjudge::backend::parse_response;
use clinjudge::kb::match_rule;
use clinjudge::report::{render_summary, parse_summary, CorpusReport};
use clinjudge::synth;
use clinjudge::text::{normalize, surface_key};
use clinjudge::*;

fn turn_text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 ,']{0,40}[.?]"
}

fn seed_kb() -> &'static KnowledgeBase {
    static KB: std::sync::OnceLock<KnowledgeBase> = std::sync::OnceLock::new();
    KB.get_or_init(KnowledgeBase::seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transcript_text_round_trips(turns in prop::collection::vec((any::<bool>(), turn_text()), 1..8)) {
        let t = Transcript::new(
            "rt",
            turns.into_iter().map(|(doc, s)| (if doc { Speaker::Doctor } else { Speaker::Patient }, s)),
            None,
        ).unwrap();
        prop_assert_eq!(parse_transcript(&t.to_text(), "other").unwrap(), t);
    }

    #[test]
    fn soap_text_round_trips(bodies in prop::array::uniform4("[A-Za-z][A-Za-z0-9 ,;]{0,40}")) {
        let s = SoapNote::new("rt", SectionLabel::ALL.into_iter().zip(bodies.map(|b| b.trim().to_string()))).unwrap();
        prop_assert_eq!(parse_soap_note(&s.to_text(), "other").unwrap(), s);
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,60}") {
        let n = normalize(&s);
        prop_assert_eq!(normalize(&n), n.clone());
        let k = surface_key(&s);
        prop_assert_eq!(surface_key(&k), k);
    }

    #[test]
    fn response_parser_never_panics(raw in "\\PC{0,80}") {
        let _ = parse_response("req", &raw);
    }

    /// Every synthetic case validates, stage 1 never supports what stage 2
    /// rejects, and generation is a pure function of the seed.
    #[test]
    fn synthetic_cases_are_monotone(seed in any::<u64>(), which in 0usize..5) {
        let kb = seed_kb();
        let mut templates = synth::preset("paper-like").unwrap();
        templates.extend(synth::preset("balanced").unwrap());
        let template = &templates[which % templates.len()];
        let case = synth::generate_case(template, kb, seed).unwrap();
        prop_assert_eq!(&synth::generate_case(template, kb, seed).unwrap(), &case);
        let cfg = ExtractorConfig::default();
        let r1 = judge_note(&case.transcript, &case.note, kb, &cfg, &PolicyConfig::stage1()).unwrap();
        let r2 = judge_note(&case.transcript, &case.note, kb, &cfg, &PolicyConfig::stage2()).unwrap();
        for (v1, v2) in r1.verdicts.iter().zip(&r2.verdicts) {
            prop_assert!(v1.validate().is_ok() && v2.validate().is_ok());
            prop_assert!(v1.label == Label::Hallucinated || v2.label == Label::Supported, "{} supported only by stage 1", v1.claim_id);
        }
        prop_assert!(r1.rate >= r2.rate);
    }

    /// Adding an asserted fact never stops a rule from firing; adding a
    /// denied fact never changes the outcome.
    #[test]
    fn match_rule_is_monotone_in_asserted_facts(seed in any::<u64>(), denied in any::<bool>()) {
        let kb = seed_kb();
        let case = synth::generate_case(&synth::preset("paper-like").unwrap()[0], kb, seed).unwrap();
        let cfg = ExtractorConfig::default();
        let facts = extract_facts(&case.transcript, kb, &cfg).unwrap();
        let rule = &kb.rules()[(seed % kb.rules().len() as u64) as usize];
        let before = match_rule(rule, &facts).is_some();
        let mut extra = facts.facts.clone();
        let mut added = extra[0].clone();
        added.id = "extra:F999".into();
        added.concepts = rule.antecedents.clone();
        added.polarity = if denied { Polarity::Denied } else { Polarity::Asserted };
        extra.push(added);
        let after = match_rule(rule, &FactBase::new(facts.transcript_id.clone(), extra).unwrap()).is_some();
        if denied {
            prop_assert_eq!(before, after);
        } else {
            prop_assert!(after);
        }
    }

    /// Duplicating every note leaves the macro and micro rates unchanged,
    /// and the summary file round-trips.
    #[test]
    fn corpus_rates_are_scale_invariant(seed in any::<u64>(), copies in 1usize..4) {
        let kb = seed_kb();
        let corpus = synth::generate_corpus(&synth::preset("balanced").unwrap(), kb, 3, seed).unwrap();
        let cfg = ExtractorConfig::default();
        let notes: Vec<_> = corpus
            .iter()
            .map(|c| judge_note(&c.transcript, &c.note, kb, &cfg, &PolicyConfig::stage2()).unwrap())
            .collect();
        let once = CorpusReport::new(PolicyId::Stage2InferenceAware, notes.clone());
        let many = CorpusReport::new(
            PolicyId::Stage2InferenceAware,
            (0..copies).flat_map(|_| notes.clone()).collect(),
        );
        prop_assert!((once.mean_rate - many.mean_rate).abs() < 1e-12);
        prop_assert!((once.micro_rate - many.micro_rate).abs() < 1e-12);
        let (rows, delta) = parse_summary(&render_summary(&[once.summary()], None)).unwrap();
        prop_assert_eq!(rows, vec![once.summary()]);
        prop_assert_eq!(delta, None);
    }
}
