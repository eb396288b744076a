mod common;

use common::fixture;
use mile_core::data::datagen::{generate_dataset, validate};
use mile_core::data::records::{read_instruction_records, read_qa_records, to_jsonl};
use mile_core::data::synth::synthetic_corpus;
use mile_core::data::{AnswerType, Attribute, Manifest, TemplateSet};
use mile_core::eval::{global_accuracy, normalize_answer, score, EvalReport, Prediction};
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;

#[test]
fn synthetic_fixtures_regenerate() {
    for (name, n, seed) in [("toy_origin.jsonl", 64, 1), ("overfit16.jsonl", 16, 7), ("toy_eval.jsonl", 32, 99)] {
        let shipped = fs::read_to_string(fixture(name)).unwrap();
        assert_eq!(shipped, to_jsonl(&synthetic_corpus(n, seed)), "{name}");
    }
}

#[test]
fn instruct_fixture_regenerates() {
    let records = read_qa_records(&fixture("toy_origin.jsonl")).unwrap();
    let (generated, manifest) = generate_dataset(&records, 1, 3, &TemplateSet::builtin()).unwrap();
    assert_eq!(fs::read_to_string(fixture("toy_instruct.jsonl")).unwrap(), to_jsonl(&generated));
    let shipped: Manifest =
        serde_json::from_str(&fs::read_to_string(fixture("toy_instruct.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(shipped, manifest);
    assert_eq!(read_instruction_records(&fixture("toy_instruct.jsonl")).unwrap(), generated);
}

/// Checks the generation rules directly, without the library validator.
fn check_rules(k: usize, seed: u64) {
    let records = read_qa_records(&fixture("qa200.jsonl")).unwrap();
    assert_eq!(records.len(), 200);
    let (generated, _) = generate_dataset(&records, seed, k, &TemplateSet::builtin()).unwrap();

    let mut pools: BTreeMap<Attribute, BTreeSet<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.answer_type == AnswerType::Open) {
        pools.entry(r.attribute).or_default().insert(&r.answer);
    }
    for (src, gen) in records.iter().zip(&generated) {
        assert_eq!(gen.answer, src.answer);
        assert!(gen.instruction.contains(src.question.trim()));
        match src.answer_type {
            AnswerType::Closed => assert!(gen.options.is_empty()),
            AnswerType::Open => {
                assert_eq!(gen.options.iter().filter(|o| **o == src.answer).count(), 1);
                let own = &pools[&src.attribute];
                let distinct: BTreeSet<&String> = gen.options.iter().collect();
                assert_eq!(distinct.len(), gen.options.len());
                assert_eq!(gen.options.len(), (own.len() - 1).min(k) + 1 + padding(own.len(), k, &pools));
                for o in gen.options.iter().filter(|o| **o != src.answer) {
                    let same = own.contains(o.as_str());
                    let padded = pools.get(&Attribute::Other).is_some_and(|p| p.contains(o.as_str()));
                    assert!(same || (padded && own.len() - 1 < k), "distractor {o} for {:?}", src.attribute);
                }
            }
        }
    }
    assert!(validate(&records, &generated, &TemplateSet::builtin(), k).is_empty());
}

/// Number of `other` answers added when an attribute pool is too small.
fn padding(own: usize, k: usize, pools: &BTreeMap<Attribute, BTreeSet<&str>>) -> usize {
    let missing = k.saturating_sub(own - 1);
    if missing == 0 {
        return 0;
    }
    pools.get(&Attribute::Other).map_or(0, |p| p.len()).min(missing)
}

#[test]
fn generated_records_follow_rules() {
    for (k, seed) in [(3, 0), (3, 42), (1, 5), (5, 9)] {
        check_rules(k, seed);
    }
}

#[test]
fn generation_is_seeded() {
    let records = read_qa_records(&fixture("qa200.jsonl")).unwrap();
    let t = TemplateSet::builtin();
    let a = to_jsonl(&generate_dataset(&records, 4, 3, &t).unwrap().0);
    assert_eq!(a, to_jsonl(&generate_dataset(&records, 4, 3, &t).unwrap().0));
    assert_ne!(a, to_jsonl(&generate_dataset(&records, 5, 3, &t).unwrap().0));
}

#[test]
fn validator_flags_tampering() {
    let records = read_qa_records(&fixture("qa200.jsonl")).unwrap();
    let t = TemplateSet::builtin();
    let (mut generated, _) = generate_dataset(&records, 0, 3, &t).unwrap();
    let open = records.iter().position(|r| r.answer_type == AnswerType::Open).unwrap();
    let closed = records.iter().position(|r| r.answer_type == AnswerType::Closed).unwrap();
    generated[open].options.push(records[open].answer.clone());
    generated[closed].options.push("yes".into());
    let flagged: BTreeSet<usize> = validate(&records, &generated, &t, 3).iter().map(|v| v.index).collect();
    assert_eq!(flagged, BTreeSet::from([open, closed]));
}

#[test]
fn instruction_lines_rejected_as_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.jsonl");
    fs::copy(fixture("toy_instruct.jsonl"), &p).unwrap();
    assert!(read_qa_records(&p).is_err());
}

#[test]
fn scoring_counts_by_type() {
    let p = |t, ok| Prediction {
        prediction: String::new(),
        reference: String::new(),
        answer_type: t,
        correct: ok,
    };
    let preds = [
        p(AnswerType::Open, true),
        p(AnswerType::Open, false),
        p(AnswerType::Open, true),
        p(AnswerType::Closed, true),
        p(AnswerType::Closed, false),
    ];
    assert_eq!(score(&preds), EvalReport::from_counts(3, 2, 2, 1));
}

proptest! {
    #[test]
    fn global_is_count_weighted(n_open in 0usize..500, n_closed in 0usize..500, a in 0usize..=500, b in 0usize..=500) {
        let (co, cc) = (a.min(n_open), b.min(n_closed));
        let r = EvalReport::from_counts(n_open, co, n_closed, cc);
        let n = n_open + n_closed;
        let expected = if n == 0 { 0.0 } else { 100.0 * (co + cc) as f64 / n as f64 };
        prop_assert!((r.acc_global - expected).abs() < 1e-9);
        prop_assert!((global_accuracy(n_open, r.acc_open, n_closed, r.acc_closed) - expected).abs() < 1e-9);
    }

    #[test]
    fn normalization_is_idempotent(s in "[ a-zA-Z.,!?;:\\t]{0,24}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        prop_assert_eq!(once.clone(), once.trim().to_lowercase());
    }
}
