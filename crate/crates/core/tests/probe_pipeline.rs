mod common;

use common::majority_check;
use conslab::metrics::relation_report;
use conslab::probe::{prediction_records, prepare_suite, probe_suite, tables_from_records, tuple_correctness};
use conslab::report::{to_json, FilterSummary, ProbeReport};
use conslab::resource::{build_vocabulary, generate_synth_kb, KBTuple, Pattern, Relation};
use conslab::scorer::{MajorityScorer, ScoreRequest, Scorer, ToyDims, ToyMLM, ToyParams};
use conslab::trainer::{pretrain, MlmExample, PretrainConfig};

#[test]
fn majority_baseline_on_synthetic_kbs() {
    for seed in 0..5 {
        let kb = generate_synth_kb(seed, 4, 40, 5);
        assert_eq!(majority_check(&kb.relations, &kb.tuples), Ok(4));
    }
}

#[test]
fn prediction_dump_round_trips_into_the_same_tables() {
    let kb = generate_synth_kb(3, 3, 30, 4);
    let scorer = MajorityScorer::from_tuples(&kb.tuples);
    let suite = prepare_suite(&kb.relations, &kb.tuples, &[&scorer]).unwrap();
    let tables = probe_suite(&scorer, &suite).unwrap();
    let records = prediction_records(&tables);
    assert_eq!(records.len(), suite.query_count());
    let rebuilt = tables_from_records(&suite.relations, &records).unwrap();
    for (a, b) in tables.iter().zip(&rebuilt) {
        assert_eq!(relation_report(a).unwrap(), relation_report(b).unwrap());
    }
    let correct = tuple_correctness(&records);
    assert_eq!(correct.len(), suite.all_tuples().len());
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let render = || {
        let kb = generate_synth_kb(9, 3, 30, 4);
        let scorer = MajorityScorer::from_tuples(&kb.tuples);
        let suite = prepare_suite(&kb.relations, &kb.tuples, &[&scorer]).unwrap();
        let reports = probe_suite(&scorer, &suite)
            .unwrap()
            .iter()
            .map(|t| relation_report(t).unwrap())
            .collect();
        let filter = FilterSummary { retained: suite.retained, removed: suite.removed, dropped_relations: vec![] };
        let r = ProbeReport::new("majority", "fp", 9, "T", serde_json::json!({}), filter, reports).unwrap();
        to_json(&r).unwrap()
    };
    assert_eq!(render(), render());
}

#[test]
fn toy_model_memorises_a_single_fact() {
    let relation = Relation {
        id: "r1".into(),
        name: "r1".into(),
        cardinality: conslab::resource::Cardinality::NToOne,
        patterns: vec![Pattern::new("[X] r1 [Y]", true, 0, 0)],
        candidates: vec![],
    };
    let tuples = vec![
        KBTuple { relation_id: "r1".into(), subject: "A".into(), object: "b".into() },
        KBTuple { relation_id: "r1".into(), subject: "C".into(), object: "d".into() },
    ];
    let vocab = build_vocabulary(std::slice::from_ref(&relation), &tuples);
    let init = ToyMLM::new(vocab.clone(), ToyParams::random(ToyDims::new(vocab.len(), 8, 16, 8), 0)).unwrap();
    let corpus: Vec<MlmExample> = tuples
        .iter()
        .map(|t| MlmExample { pattern: relation.patterns[0].clone(), subject: t.subject.clone(), object: t.object.clone() })
        .collect();
    let cfg = PretrainConfig { epochs: 200, batch_size: 2, learning_rate: 0.2, mlm_mask_rate: 0.0, seed: 0 };
    let (model, losses) = pretrain(&init, &corpus, &cfg).unwrap();
    assert!(losses.last().unwrap() < &0.05, "final loss {:?}", losses.last());
    let cands = vec!["b".to_string(), "d".to_string()];
    let a = model.score(&ScoreRequest::new("A r1 [MASK]", cands.clone())).unwrap();
    let c = model.score(&ScoreRequest::new("C r1 [MASK]", cands)).unwrap();
    assert_eq!((a.argmax(), c.argmax()), (0, 1));
}
