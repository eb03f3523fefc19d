mod common;

use std::time::Instant;

use common::{first_mismatch, oracle, random_table, seeded};
use conslab::metrics::*;
use conslab::resource::Cardinality;
use proptest::prelude::*;

fn row(gold: &str, preds: &[&str]) -> TupleRow {
    TupleRow {
        subject: format!("s-{gold}-{}", preds.join("")),
        gold: gold.into(),
        predictions: preds.iter().map(|p| p.to_string()).collect(),
    }
}

fn metas(groups: &[(i64, i64)]) -> Vec<PatternMeta> {
    groups
        .iter()
        .enumerate()
        .map(|(i, &(l, s))| PatternMeta { is_base: i == 0, lex_group: l, syn_group: s })
        .collect()
}

#[test]
fn thousand_random_tables_match_the_oracle() {
    let start = Instant::now();
    let mut rng = seeded(20_240_601);
    for i in 0..1000 {
        let table = random_table(&mut rng, 10, 6);
        if let Some(metric) = first_mismatch(&table) {
            panic!("table {i}: {metric} differs from enumeration\n{table:?}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn worked_fixtures() {
    let t = PredictionTable::new(
        "r",
        Cardinality::NToOne,
        metas(&[(0, 0), (1, 0), (2, 0)]),
        vec![],
        vec![row("A", &["A", "A", "A"]), row("A", &["A", "A", "B"])],
    )
    .unwrap();
    assert_eq!(consistency(&t), Some(4.0 / 6.0));

    let t = PredictionTable::new(
        "r",
        Cardinality::NToOne,
        metas(&[(0, 0), (1, 0), (2, 0)]),
        vec![],
        vec![row("A", &["A", "A", "A"]), row("A", &["B", "C", "C"])],
    )
    .unwrap();
    let ex = extractability(&t);
    assert_eq!(ex.know_const, Some(1.0));
    assert_eq!(ex.unk_const, Some(1.0 / 3.0));
    assert_eq!(consistency(&t), Some(4.0 / 6.0));

    // groups (1,1), (1,2), (2,2): only {p1, p2} share lex and differ in syntax
    let t = PredictionTable::new(
        "r",
        Cardinality::NToOne,
        metas(&[(1, 1), (1, 2), (2, 2)]),
        vec![],
        vec![row("A", &["A", "B", "B"])],
    )
    .unwrap();
    let s = syntax_subsets(&t);
    assert_eq!(s.diff_syntax, Some(0.0));
    assert_eq!(s.no_change, None);

    let t = PredictionTable::new(
        "r",
        Cardinality::NToOne,
        metas(&[(0, 0), (1, 0), (2, 0)]),
        vec![],
        vec![row("Paris", &["Amsterdam", "Madagascar", "Luxembourg"])],
    )
    .unwrap();
    assert_eq!(consistency(&t), Some(0.0));
}

#[test]
fn single_pattern_relation_reports_null_not_zero() {
    let t = PredictionTable::new(
        "solo",
        Cardinality::NToOne,
        metas(&[(0, 0)]),
        vec![],
        vec![row("A", &["A"]), row("A", &["B"])],
    )
    .unwrap();
    let r = relation_report(&t).unwrap();
    assert_eq!(r.consistency, None);
    assert_eq!(r.consistent_acc, None);
    assert_eq!(r.know_const, None);
    assert_eq!(r.unk_const, None);
    assert_eq!(r.accuracy, Some(0.5));
    assert_eq!(r.pair_count, 0);

    let summary = aggregate(&[r], AggregateMode::Macro).unwrap();
    assert!(summary.consistency.is_none());
}

#[test]
fn constant_rows_are_fully_consistent_and_distinct_rows_are_not() {
    let t = PredictionTable::new(
        "r",
        Cardinality::NToOne,
        metas(&[(0, 0), (0, 1), (1, 1), (2, 0)]),
        vec![],
        vec![row("A", &["A", "A", "A", "A"]), row("A", &["C", "C", "C", "C"])],
    )
    .unwrap();
    assert_eq!(consistency(&t), Some(1.0));
    let t = PredictionTable::new(
        "r",
        Cardinality::NToOne,
        metas(&[(0, 0), (0, 1), (1, 1), (2, 0)]),
        vec![],
        vec![row("A", &["A", "B", "C", "D"])],
    )
    .unwrap();
    assert_eq!(consistency(&t), Some(0.0));
}

fn table_strategy(max_tuples: usize, max_patterns: usize) -> impl Strategy<Value = PredictionTable> {
    any::<u64>().prop_map(move |seed| random_table(&mut seeded(seed), max_tuples, max_patterns))
}

proptest! {
    #[test]
    fn structural_invariants(table in table_strategy(10, 6)) {
        let r = relation_report(&table).unwrap();
        let n = table.patterns.len();
        prop_assert_eq!(r.pair_count, table.rows.len() * n * (n - 1) / 2);
        prop_assert_eq!(r.tuple_count, table.rows.len());
        let values = [
            r.consistency, r.accuracy, r.consistent_acc, r.succ_patt, r.succ_objs,
            r.know_const, r.unk_const, r.diff_syntax_consistency,
            r.no_change_consistency, r.determinism,
        ];
        for v in values.into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let (Some(ca), Some(acc), Some(cons)) = (r.consistent_acc, r.accuracy, r.consistency) {
            prop_assert!(ca <= acc && ca <= cons);
        }
    }

    #[test]
    fn known_and_unknown_pairs_partition_the_total(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut table = random_table(&mut rng, 5, 4);
        while table.rows.len() != 5 || table.patterns.len() != 4 {
            table = random_table(&mut rng, 5, 4);
        }
        let c = RelationCounts::from_table(&table);
        let o = oracle(&table);
        prop_assert_eq!(c.known_agreeing + c.unknown_agreeing, c.agreeing_pairs);
        prop_assert_eq!(c.known_pairs + c.unknown_pairs, o.pair_count);
        prop_assert_eq!(Some(c.agreeing_pairs as f64 / 30.0), o.consistency);
    }

    #[test]
    fn consistency_is_invariant_under_relabeling(table in table_strategy(10, 6), shift in 1usize..50) {
        let relabel = |s: &str| format!("x{}", s.trim_start_matches("obj").parse::<usize>().unwrap() + shift);
        let rows = table.rows.iter().map(|r| TupleRow {
            subject: r.subject.clone(),
            gold: relabel(&r.gold),
            predictions: r.predictions.iter().map(|p| relabel(p)).collect(),
        }).collect();
        let candidates = table.candidates.iter().map(|c| relabel(c)).collect();
        let renamed = PredictionTable::new(
            table.relation_id.clone(), table.cardinality, table.patterns.clone(), candidates, rows,
        ).unwrap();
        prop_assert_eq!(consistency(&table), consistency(&renamed));
        prop_assert_eq!(consistent_acc(&table), consistent_acc(&renamed));
    }
}

#[test]
fn macro_and_micro_weighting() {
    // 0.4 over 10 pairs and 0.8 over 30 pairs
    let mk = |id: &str, agree_rows: usize, total_rows: usize| {
        let rows = (0..total_rows)
            .map(|i| if i < agree_rows { row("A", &["A", "A"]) } else { row("A", &["A", "B"]) })
            .enumerate()
            .map(|(i, mut r)| {
                r.subject = format!("s{i}");
                r
            })
            .collect();
        let t = PredictionTable::new(id, Cardinality::NToOne, metas(&[(0, 0), (1, 0)]), vec![], rows)
            .unwrap();
        relation_report(&t).unwrap()
    };
    let reports = [mk("a", 4, 10), mk("b", 24, 30)];
    let m = aggregate(&reports, AggregateMode::Macro).unwrap();
    let u = aggregate(&reports, AggregateMode::Micro).unwrap();
    approx::assert_abs_diff_eq!(m.consistency.unwrap().mean, 0.6, epsilon = 1e-12);
    approx::assert_abs_diff_eq!(u.consistency.unwrap().mean, 0.7, epsilon = 1e-12);
    approx::assert_abs_diff_eq!(m.consistency.unwrap().std.unwrap(), 0.2, epsilon = 1e-12);
}
