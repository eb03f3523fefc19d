//! Consistency and knowledge measures over prediction tables.
//!
//! Agreement between two patterns is exact string equality of their top
//! candidates. Pair agreements are counted from per-group prediction tallies
//! (`sum over values of C(count, 2)`) rather than by enumerating pairs.
//!
//! A metric whose denominator is empty is `None`, never zero, and is left out
//! of macro averages.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resource::{Cardinality, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternMeta {
    pub is_base: bool,
    pub lex_group: i64,
    pub syn_group: i64,
}

impl PatternMeta {
    pub fn from_relation(relation: &Relation) -> Vec<PatternMeta> {
        relation
            .patterns
            .iter()
            .map(|p| PatternMeta {
                is_base: p.is_base,
                lex_group: p.lex_group,
                syn_group: p.syn_group,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleRow {
    pub subject: String,
    pub gold: String,
    /// One predicted candidate per pattern.
    pub predictions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub relation_id: String,
    pub cardinality: Cardinality,
    pub patterns: Vec<PatternMeta>,
    pub candidates: Vec<String>,
    pub rows: Vec<TupleRow>,
}

impl PredictionTable {
    pub fn new(
        relation_id: impl Into<String>,
        cardinality: Cardinality,
        patterns: Vec<PatternMeta>,
        candidates: Vec<String>,
        rows: Vec<TupleRow>,
    ) -> Result<Self> {
        let relation_id = relation_id.into();
        if patterns.is_empty() {
            return Err(Error::invalid(format!("{relation_id}: table without patterns")));
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("{relation_id}: table without tuples")));
        }
        for row in &rows {
            if row.predictions.len() != patterns.len() {
                return Err(Error::invalid(format!(
                    "{relation_id}: subject {} has {} predictions for {} patterns",
                    row.subject,
                    row.predictions.len(),
                    patterns.len()
                )));
            }
            if !candidates.is_empty() {
                if let Some(p) = row.predictions.iter().find(|p| !candidates.contains(p)) {
                    return Err(Error::invalid(format!(
                        "{relation_id}: prediction {p:?} is not a candidate"
                    )));
                }
            }
        }
        Ok(PredictionTable {
            relation_id,
            cardinality,
            patterns,
            candidates,
            rows,
        })
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn pairs_per_tuple(&self) -> usize {
        let n = self.n_patterns();
        n * n.saturating_sub(1) / 2
    }

    pub fn base_index(&self) -> Result<usize> {
        let mut bases = self.patterns.iter().enumerate().filter(|(_, p)| p.is_base);
        match (bases.next(), bases.next()) {
            (Some((i, _)), None) => Ok(i),
            _ => Err(Error::MissingBasePattern(self.relation_id.clone())),
        }
    }
}

/// Number of agreeing pairs among the predictions at `indices`.
fn agreeing_pairs<'a>(row: &'a TupleRow, indices: impl Iterator<Item = usize>) -> usize {
    let mut tally: HashMap<&'a str, usize> = HashMap::new();
    for i in indices {
        *tally.entry(row.predictions[i].as_str()).or_default() += 1;
    }
    tally.values().map(|&c| c * (c - 1) / 2).sum()
}

fn pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Raw counts behind every metric of one relation; pooled for micro averages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCounts {
    pub tuples: usize,
    pub patterns: usize,
    pub pairs: usize,
    pub agreeing_pairs: usize,
    pub base_correct: usize,
    pub all_correct: usize,
    pub patterns_succ: usize,
    pub tuples_succ: usize,
    pub known_pairs: usize,
    pub known_agreeing: usize,
    pub unknown_pairs: usize,
    pub unknown_agreeing: usize,
    pub diff_syntax_pairs: usize,
    pub diff_syntax_agreeing: usize,
    pub no_change_pairs: usize,
    pub no_change_agreeing: usize,
}

impl RelationCounts {
    pub fn from_table(table: &PredictionTable) -> Self {
        let n = table.n_patterns();
        let base = table.base_index().ok();

        // pattern groups: lex -> (syn -> indices)
        let mut groups: BTreeMap<i64, BTreeMap<i64, Vec<usize>>> = BTreeMap::new();
        for (i, p) in table.patterns.iter().enumerate() {
            groups
                .entry(p.lex_group)
                .or_default()
                .entry(p.syn_group)
                .or_default()
                .push(i);
        }
        let lex_pairs: usize = groups
            .values()
            .map(|syn| pairs(syn.values().map(Vec::len).sum()))
            .sum();
        let same_pairs: usize = groups
            .values()
            .flat_map(|syn| syn.values())
            .map(|ix| pairs(ix.len()))
            .sum();

        let mut c = RelationCounts {
            tuples: table.rows.len(),
            patterns: n,
            pairs: table.rows.len() * pairs(n),
            ..Default::default()
        };
        let mut pattern_hit = vec![false; n];
        for row in &table.rows {
            let agree = agreeing_pairs(row, 0..n);
            c.agreeing_pairs += agree;

            let hits: Vec<bool> = row.predictions.iter().map(|p| *p == row.gold).collect();
            if base.is_some_and(|b| hits[b]) {
                c.base_correct += 1;
            }
            if hits.iter().all(|&h| h) {
                c.all_correct += 1;
            }
            for (seen, &h) in pattern_hit.iter_mut().zip(&hits) {
                *seen |= h;
            }
            if hits.iter().any(|&h| h) {
                c.tuples_succ += 1;
                c.known_pairs += pairs(n);
                c.known_agreeing += agree;
            } else {
                c.unknown_pairs += pairs(n);
                c.unknown_agreeing += agree;
            }

            let mut lex_agree = 0;
            for syn in groups.values() {
                lex_agree += agreeing_pairs(row, syn.values().flatten().copied());
                for ix in syn.values() {
                    c.no_change_agreeing += agreeing_pairs(row, ix.iter().copied());
                }
            }
            c.diff_syntax_agreeing += lex_agree;
        }
        // diff-syntax = same lexical group minus same (lex, syn) group
        c.diff_syntax_agreeing -= c.no_change_agreeing;
        c.diff_syntax_pairs = table.rows.len() * (lex_pairs - same_pairs);
        c.no_change_pairs = table.rows.len() * same_pairs;
        c.patterns_succ = pattern_hit.iter().filter(|&&h| h).count();
        c
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Fraction of agreeing (tuple, pattern-pair) cells. `None` with < 2 patterns.
pub fn consistency(table: &PredictionTable) -> Option<f64> {
    let c = RelationCounts::from_table(table);
    ratio(c.agreeing_pairs, c.pairs)
}

/// Fraction of tuples whose base-pattern prediction is the gold object.
pub fn accuracy(table: &PredictionTable) -> Result<f64> {
    table.base_index()?;
    let c = RelationCounts::from_table(table);
    Ok(c.base_correct as f64 / c.tuples as f64)
}

/// Fraction of tuples for which every pattern predicts the gold object.
pub fn consistent_acc(table: &PredictionTable) -> Option<f64> {
    if table.n_patterns() < 2 {
        return None;
    }
    let c = RelationCounts::from_table(table);
    ratio(c.all_correct, c.tuples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extractability {
    pub succ_patt: f64,
    pub succ_objs: f64,
    pub know_const: Option<f64>,
    pub unk_const: Option<f64>,
}

pub fn extractability(table: &PredictionTable) -> Extractability {
    let c = RelationCounts::from_table(table);
    Extractability {
        succ_patt: c.patterns_succ as f64 / c.patterns as f64,
        succ_objs: c.tuples_succ as f64 / c.tuples as f64,
        know_const: ratio(c.known_agreeing, c.known_pairs),
        unk_const: ratio(c.unknown_agreeing, c.unknown_pairs),
    }
}

/// Same arithmetic as [`consistency`], reserved for N-M relations.
pub fn determinism(table: &PredictionTable) -> Result<Option<f64>> {
    if table.cardinality != Cardinality::NToMany {
        return Err(Error::invalid(format!(
            "determinism is defined for N-M relations; {} is N-1",
            table.relation_id
        )));
    }
    Ok(consistency(table))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntaxSubsets {
    /// Pairs sharing a lexical group but differing in syntax group.
    pub diff_syntax: Option<f64>,
    /// Pairs sharing both groups.
    pub no_change: Option<f64>,
}

pub fn syntax_subsets(table: &PredictionTable) -> SyntaxSubsets {
    let c = RelationCounts::from_table(table);
    SyntaxSubsets {
        diff_syntax: ratio(c.diff_syntax_agreeing, c.diff_syntax_pairs),
        no_change: ratio(c.no_change_agreeing, c.no_change_pairs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub relation_id: String,
    pub cardinality: Cardinality,
    pub consistency: Option<f64>,
    pub accuracy: Option<f64>,
    pub consistent_acc: Option<f64>,
    pub succ_patt: Option<f64>,
    pub succ_objs: Option<f64>,
    pub know_const: Option<f64>,
    pub unk_const: Option<f64>,
    pub diff_syntax_consistency: Option<f64>,
    pub no_change_consistency: Option<f64>,
    pub determinism: Option<f64>,
    pub pair_count: usize,
    pub tuple_count: usize,
    pub counts: RelationCounts,
}

/// N-1 relations get the consistency family; N-M relations get determinism
/// only.
pub fn relation_report(table: &PredictionTable) -> Result<RelationReport> {
    let base_correct = table.base_index().map(|_| ());
    let c = RelationCounts::from_table(table);
    let mut r = RelationReport {
        relation_id: table.relation_id.clone(),
        cardinality: table.cardinality,
        consistency: None,
        accuracy: None,
        consistent_acc: None,
        succ_patt: None,
        succ_objs: None,
        know_const: None,
        unk_const: None,
        diff_syntax_consistency: None,
        no_change_consistency: None,
        determinism: None,
        pair_count: c.pairs,
        tuple_count: c.tuples,
        counts: c,
    };
    match table.cardinality {
        Cardinality::NToMany => r.determinism = ratio(c.agreeing_pairs, c.pairs),
        Cardinality::NToOne => {
            base_correct?;
            let multi = c.patterns >= 2;
            r.consistency = ratio(c.agreeing_pairs, c.pairs);
            r.accuracy = ratio(c.base_correct, c.tuples);
            r.consistent_acc = if multi { ratio(c.all_correct, c.tuples) } else { None };
            r.succ_patt = ratio(c.patterns_succ, c.patterns);
            r.succ_objs = ratio(c.tuples_succ, c.tuples);
            r.know_const = ratio(c.known_agreeing, c.known_pairs);
            r.unk_const = ratio(c.unknown_agreeing, c.unknown_pairs);
            r.diff_syntax_consistency = ratio(c.diff_syntax_agreeing, c.diff_syntax_pairs);
            r.no_change_consistency = ratio(c.no_change_agreeing, c.no_change_pairs);
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over relations (macro only).
    pub std: Option<f64>,
    pub relations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub mode: AggregateMode,
    pub relations: usize,
    pub consistency: Option<MetricSummary>,
    pub accuracy: Option<MetricSummary>,
    pub consistent_acc: Option<MetricSummary>,
    pub succ_patt: Option<MetricSummary>,
    pub succ_objs: Option<MetricSummary>,
    pub know_const: Option<MetricSummary>,
    pub unk_const: Option<MetricSummary>,
    pub diff_syntax_consistency: Option<MetricSummary>,
    pub no_change_consistency: Option<MetricSummary>,
    pub determinism: Option<MetricSummary>,
}

type Field = fn(&RelationReport) -> Option<f64>;
type Pooled = fn(&RelationCounts) -> (usize, usize);

fn macro_summary(reports: &[&RelationReport], field: Field) -> Option<MetricSummary> {
    let values: Vec<f64> = reports.iter().filter_map(|r| field(r)).collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MetricSummary {
        mean,
        std: Some(var.sqrt()),
        relations: values.len(),
    })
}

fn micro_summary(reports: &[&RelationReport], field: Field, pooled: Pooled) -> Option<MetricSummary> {
    let (mut num, mut den, mut n) = (0, 0, 0);
    for r in reports.iter().filter(|r| field(r).is_some()) {
        let (a, b) = pooled(&r.counts);
        num += a;
        den += b;
        n += 1;
    }
    ratio(num, den).map(|mean| MetricSummary {
        mean,
        std: None,
        relations: n,
    })
}

/// Macro (unweighted mean over relations) or micro (pooled counts) summary.
/// Relations are reduced in sorted id order.
pub fn aggregate(reports: &[RelationReport], mode: AggregateMode) -> Result<SuiteSummary> {
    if reports.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty report set"));
    }
    let mut sorted: Vec<&RelationReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.relation_id.cmp(&b.relation_id));

    let metric = |field: Field, pooled: Pooled| match mode {
        AggregateMode::Macro => macro_summary(&sorted, field),
        AggregateMode::Micro => micro_summary(&sorted, field, pooled),
    };
    Ok(SuiteSummary {
        mode,
        relations: sorted.len(),
        consistency: metric(|r| r.consistency, |c| (c.agreeing_pairs, c.pairs)),
        accuracy: metric(|r| r.accuracy, |c| (c.base_correct, c.tuples)),
        consistent_acc: metric(|r| r.consistent_acc, |c| (c.all_correct, c.tuples)),
        succ_patt: metric(|r| r.succ_patt, |c| (c.patterns_succ, c.patterns)),
        succ_objs: metric(|r| r.succ_objs, |c| (c.tuples_succ, c.tuples)),
        know_const: metric(|r| r.know_const, |c| (c.known_agreeing, c.known_pairs)),
        unk_const: metric(|r| r.unk_const, |c| (c.unknown_agreeing, c.unknown_pairs)),
        diff_syntax_consistency: metric(
            |r| r.diff_syntax_consistency,
            |c| (c.diff_syntax_agreeing, c.diff_syntax_pairs),
        ),
        no_change_consistency: metric(
            |r| r.no_change_consistency,
            |c| (c.no_change_agreeing, c.no_change_pairs),
        ),
        determinism: metric(|r| r.determinism, |c| (c.agreeing_pairs, c.pairs)),
    })
}
