//! Brute-force reference implementations of the table metrics, written
//! directly from their definitions by enumerating every (tuple, pattern pair)
//! cell. Shared by the metric tests and the acceptance target.

#![allow(dead_code)]

use conslab::metrics::{PatternMeta, PredictionTable, TupleRow};
use conslab::resource::Cardinality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub consistency: Option<f64>,
    pub accuracy: Option<f64>,
    pub consistent_acc: Option<f64>,
    pub succ_patt: f64,
    pub succ_objs: f64,
    pub know_const: Option<f64>,
    pub unk_const: Option<f64>,
    pub diff_syntax: Option<f64>,
    pub no_change: Option<f64>,
    pub pair_count: usize,
}

fn frac(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Agreeing and total pair counts over the rows in `rows`, restricted to
/// pattern pairs accepted by `keep`.
fn count_pairs(
    table: &PredictionTable,
    rows: &[&TupleRow],
    keep: impl Fn(&PatternMeta, &PatternMeta) -> bool,
) -> (usize, usize) {
    let n = table.patterns.len();
    let (mut agree, mut total) = (0, 0);
    for row in rows {
        for i in 0..n {
            for j in (i + 1)..n {
                if !keep(&table.patterns[i], &table.patterns[j]) {
                    continue;
                }
                total += 1;
                if row.predictions[i] == row.predictions[j] {
                    agree += 1;
                }
            }
        }
    }
    (agree, total)
}

pub fn oracle(table: &PredictionTable) -> OracleReport {
    let n = table.patterns.len();
    let rows: Vec<&TupleRow> = table.rows.iter().collect();
    let (agree, total) = count_pairs(table, &rows, |_, _| true);

    let bases: Vec<usize> = (0..n).filter(|&i| table.patterns[i].is_base).collect();
    let accuracy = if bases.len() == 1 {
        let b = bases[0];
        let correct = rows.iter().filter(|r| r.predictions[b] == r.gold).count();
        Some(correct as f64 / rows.len() as f64)
    } else {
        None
    };

    let consistent_acc = if n >= 2 {
        let all = rows
            .iter()
            .filter(|r| r.predictions.iter().all(|p| *p == r.gold))
            .count();
        Some(all as f64 / rows.len() as f64)
    } else {
        None
    };

    let mut patt_ok = 0;
    for j in 0..n {
        if rows.iter().any(|r| r.predictions[j] == r.gold) {
            patt_ok += 1;
        }
    }
    let known: Vec<&TupleRow> = rows
        .iter()
        .copied()
        .filter(|r| r.predictions.iter().any(|p| *p == r.gold))
        .collect();
    let unknown: Vec<&TupleRow> = rows
        .iter()
        .copied()
        .filter(|r| r.predictions.iter().all(|p| *p != r.gold))
        .collect();
    let (ka, kt) = count_pairs(table, &known, |_, _| true);
    let (ua, ut) = count_pairs(table, &unknown, |_, _| true);
    let (da, dt) = count_pairs(table, &rows, |a, b| {
        a.lex_group == b.lex_group && a.syn_group != b.syn_group
    });
    let (na, nt) = count_pairs(table, &rows, |a, b| {
        a.lex_group == b.lex_group && a.syn_group == b.syn_group
    });

    OracleReport {
        consistency: frac(agree, total),
        accuracy,
        consistent_acc,
        succ_patt: patt_ok as f64 / n as f64,
        succ_objs: known.len() as f64 / rows.len() as f64,
        know_const: frac(ka, kt),
        unk_const: frac(ua, ut),
        diff_syntax: frac(da, dt),
        no_change: frac(na, nt),
        pair_count: total,
    }
}

/// A random complete table with exactly one base pattern. Candidates are few
/// so that agreements are common.
pub fn random_table(rng: &mut ChaCha8Rng, max_tuples: usize, max_patterns: usize) -> PredictionTable {
    let n_tuples = rng.random_range(1..=max_tuples);
    let n_patterns = rng.random_range(1..=max_patterns);
    let n_cands = rng.random_range(1..=4);
    let candidates: Vec<String> = (0..n_cands).map(|i| format!("obj{i}")).collect();
    let base = rng.random_range(0..n_patterns);
    let patterns: Vec<PatternMeta> = (0..n_patterns)
        .map(|i| PatternMeta {
            is_base: i == base,
            lex_group: rng.random_range(0..3),
            syn_group: rng.random_range(0..3),
        })
        .collect();
    let rows = (0..n_tuples)
        .map(|t| TupleRow {
            subject: format!("s{t}"),
            gold: candidates[rng.random_range(0..n_cands)].clone(),
            predictions: (0..n_patterns)
                .map(|_| candidates[rng.random_range(0..n_cands)].clone())
                .collect(),
        })
        .collect();
    let cardinality = if rng.random_bool(0.2) {
        Cardinality::NToMany
    } else {
        Cardinality::NToOne
    };
    PredictionTable::new("P-rand", cardinality, patterns, candidates, rows).expect("valid table")
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compares the production metrics of `table` against the oracle and returns
/// the name of the first metric that differs.
pub fn first_mismatch(table: &PredictionTable) -> Option<String> {
    use conslab::metrics::*;

    let o = oracle(table);
    let ex = extractability(table);
    let syn = syntax_subsets(table);
    let counts = RelationCounts::from_table(table);
    let det = determinism(table);
    let checks: Vec<(&str, bool)> = vec![
        ("consistency", consistency(table) == o.consistency),
        ("accuracy", accuracy(table).ok() == o.accuracy),
        ("consistent_acc", consistent_acc(table) == o.consistent_acc),
        ("succ_patt", ex.succ_patt == o.succ_patt),
        ("succ_objs", ex.succ_objs == o.succ_objs),
        ("know_const", ex.know_const == o.know_const),
        ("unk_const", ex.unk_const == o.unk_const),
        ("diff_syntax", syn.diff_syntax == o.diff_syntax),
        ("no_change", syn.no_change == o.no_change),
        ("pair_count", counts.pairs == o.pair_count),
        (
            "determinism",
            match table.cardinality {
                Cardinality::NToMany => det.ok() == Some(o.consistency),
                Cardinality::NToOne => det.is_err(),
            },
        ),
    ];
    checks
        .into_iter()
        .find(|(_, ok)| !ok)
        .map(|(name, _)| name.to_string())
}

/// A d=4, V=12 model with one two-pattern relation and two tuples.
pub fn gradient_fixture(seed: u64) -> (conslab::scorer::ToyMLM, conslab::resource::Relation, Vec<conslab::resource::KBTuple>) {
    use conslab::resource::{build_candidates, KBTuple, Pattern, Relation};
    use conslab::scorer::{ToyDims, ToyMLM, ToyParams};

    let vocab: Vec<String> = [
        "[MASK]", "[UNK]", "alice", "bob", "paris", "rome", "born", "in", "lives", "near", "the", "city",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let tuples = vec![
        KBTuple { relation_id: "G".into(), subject: "alice".into(), object: "paris".into() },
        KBTuple { relation_id: "G".into(), subject: "bob".into(), object: "rome".into() },
    ];
    let relation = Relation {
        id: "G".into(),
        name: "gradient-fixture".into(),
        cardinality: Cardinality::NToOne,
        patterns: vec![
            Pattern::new("[X] born in [Y]", true, 0, 0),
            Pattern::new("[X] lives near the city [Y]", false, 1, 1),
        ],
        candidates: vec![],
    };
    let relation = build_candidates(&relation, &tuples).expect("candidates");
    let model = ToyMLM::new(vocab, ToyParams::random(ToyDims::new(12, 4, 6, 8), seed)).expect("model");
    (model, relation, tuples)
}

/// Worst per-block relative error `|analytic - numeric| / max(|analytic|, 1e-8)`
/// (norms over the block) between the analytic gradient of the combined loss
/// and central finite differences. The masking RNG is reseeded for every
/// evaluation so all evaluations see the same masks.
pub fn gradient_check(
    model: &conslab::scorer::ToyMLM,
    relation: &conslab::resource::Relation,
    tuples: &[conslab::resource::KBTuple],
    config: &conslab::trainer::TrainConfig,
    step: f64,
) -> Vec<(&'static str, f64)> {
    use conslab::trainer::combined_loss;

    let loss_at = |m: &conslab::scorer::ToyMLM| {
        combined_loss(m, relation, tuples, config, &mut seeded(99)).expect("loss").0.total
    };
    let (_, analytic) = combined_loss(model, relation, tuples, config, &mut seeded(99)).expect("loss");
    let mut out = Vec::new();
    for (b, (name, grad)) in analytic.blocks().into_iter().enumerate() {
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for i in 0..grad.len() {
            let mut plus = model.clone();
            plus.params.blocks_mut()[b].1[i] += step;
            let mut minus = model.clone();
            minus.params.blocks_mut()[b].1[i] -= step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            diff2 += (grad[i] - numeric).powi(2);
            norm2 += grad[i].powi(2);
        }
        out.push((name, diff2.sqrt() / norm2.sqrt().max(1e-8)));
    }
    out
}

/// Probes `relations` with the majority baseline and checks, per N-1
/// relation, that consistency is exactly 1 and accuracy equals the modal
/// object frequency counted by hand.
pub fn majority_check(
    relations: &[conslab::resource::Relation],
    tuples: &[conslab::resource::KBTuple],
) -> Result<usize, String> {
    use conslab::metrics::{accuracy, consistency};
    use conslab::probe::{prepare_suite, probe_suite};
    use conslab::scorer::MajorityScorer;
    use std::collections::BTreeMap;

    let scorer = MajorityScorer::from_tuples(tuples);
    let suite = prepare_suite(relations, tuples, &[&scorer]).map_err(|e| e.to_string())?;
    let tables = probe_suite(&scorer, &suite).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for table in tables.iter().filter(|t| t.cardinality == Cardinality::NToOne) {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut n = 0;
        for t in tuples.iter().filter(|t| t.relation_id == table.relation_id) {
            *counts.entry(t.object.as_str()).or_default() += 1;
            n += 1;
        }
        let modal = *counts.values().max().unwrap() as f64 / n as f64;
        if table.patterns.len() >= 2 && consistency(table) != Some(1.0) {
            return Err(format!("{}: consistency {:?}", table.relation_id, consistency(table)));
        }
        let acc = accuracy(table).map_err(|e| e.to_string())?;
        if acc != modal {
            return Err(format!("{}: accuracy {acc} but modal frequency {modal}", table.relation_id));
        }
        checked += 1;
    }
    Ok(checked)
}
