//! Runs a scorer over a relation suite and collects prediction tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{PatternMeta, PredictionTable, TupleRow};
use crate::resource::{
    build_candidates, group_by_relation, populate, single_token_filter, KBTuple, Relation,
};
use crate::scorer::{ScoreRequest, Scorer};

/// Relations with candidate sets and their (filtered) tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub relations: Vec<Relation>,
    pub tuples: BTreeMap<String, Vec<KBTuple>>,
    pub retained: usize,
    pub removed: usize,
    /// Relations left without tuples after filtering.
    pub dropped_relations: Vec<String>,
}

impl Suite {
    pub fn tuples_of(&self, relation_id: &str) -> &[KBTuple] {
        self.tuples.get(relation_id).map_or(&[], Vec::as_slice)
    }

    /// Number of scoring queries a probe run issues.
    pub fn query_count(&self) -> usize {
        self.relations
            .iter()
            .map(|r| r.patterns.len() * self.tuples_of(&r.id).len())
            .sum()
    }

    pub fn all_tuples(&self) -> Vec<KBTuple> {
        self.relations
            .iter()
            .flat_map(|r| self.tuples_of(&r.id).iter().cloned())
            .collect()
    }
}

/// Applies the single-token filter for every scorer, then builds candidate
/// sets from the surviving tuples.
pub fn prepare_suite(
    relations: &[Relation],
    tuples: &[KBTuple],
    scorers: &[&dyn Scorer],
) -> Result<Suite> {
    let objects: Vec<String> = tuples
        .iter()
        .map(|t| t.object.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut verdicts = Vec::with_capacity(scorers.len());
    for s in scorers {
        let single = s.tokenize_check(&objects)?;
        verdicts.push(
            objects
                .iter()
                .cloned()
                .zip(single)
                .collect::<HashMap<String, bool>>(),
        );
    }
    let filtered = single_token_filter(tuples, &verdicts)?;
    let groups = group_by_relation(&filtered.tuples);

    let mut suite = Suite {
        relations: vec![],
        tuples: BTreeMap::new(),
        retained: filtered.retained,
        removed: filtered.removed,
        dropped_relations: vec![],
    };
    for r in relations {
        match groups.get(&r.id) {
            Some(ts) if !ts.is_empty() => {
                suite.relations.push(build_candidates(r, ts)?);
                suite.tuples.insert(r.id.clone(), ts.clone());
            }
            _ => suite.dropped_relations.push(r.id.clone()),
        }
    }
    if suite.relations.is_empty() {
        return Err(Error::invalid(
            "no relation has tuples left after single-token filtering",
        ));
    }
    Ok(suite)
}

/// Top candidate for every (tuple, pattern) cell of one relation.
pub fn predict_relation(
    scorer: &dyn Scorer,
    relation: &Relation,
    tuples: &[KBTuple],
) -> Result<PredictionTable> {
    if relation.candidates.is_empty() {
        return Err(Error::invalid(format!("relation {} has no candidates", relation.id)));
    }
    let mut rows = Vec::with_capacity(tuples.len());
    for t in tuples {
        let mut predictions = Vec::with_capacity(relation.patterns.len());
        for p in 0..relation.patterns.len() {
            let cloze = populate(relation, p, &t.subject, scorer.mask_token())?;
            let req = ScoreRequest::new(cloze.text, relation.candidates.clone()).for_relation(&relation.id);
            let resp = scorer.score(&req)?;
            if resp.log_scores.len() != relation.candidates.len() {
                return Err(Error::Scorer {
                    scorer: scorer.model_id().to_owned(),
                    msg: "score count does not match candidate count".into(),
                });
            }
            predictions.push(relation.candidates[resp.argmax()].clone());
        }
        rows.push(TupleRow {
            subject: t.subject.clone(),
            gold: t.object.clone(),
            predictions,
        });
    }
    PredictionTable::new(
        relation.id.clone(),
        relation.cardinality,
        PatternMeta::from_relation(relation),
        relation.candidates.clone(),
        rows,
    )
}

pub fn probe_suite(scorer: &dyn Scorer, suite: &Suite) -> Result<Vec<PredictionTable>> {
    suite
        .relations
        .iter()
        .map(|r| predict_relation(scorer, r, suite.tuples_of(&r.id)))
        .collect()
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub relation_id: String,
    pub subject: String,
    pub object: String,
    pub pattern_index: usize,
    pub is_base: bool,
    pub prediction: String,
}

pub fn prediction_records(tables: &[PredictionTable]) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for t in tables {
        for row in &t.rows {
            for (i, (p, meta)) in row.predictions.iter().zip(&t.patterns).enumerate() {
                out.push(PredictionRecord {
                    relation_id: t.relation_id.clone(),
                    subject: row.subject.clone(),
                    object: row.gold.clone(),
                    pattern_index: i,
                    is_base: meta.is_base,
                    prediction: p.clone(),
                });
            }
        }
    }
    out
}

/// Per-tuple Consistent-Acc correctness keyed by (relation, subject, object).
pub fn tuple_correctness(records: &[PredictionRecord]) -> BTreeMap<(String, String, String), bool> {
    let mut out: BTreeMap<(String, String, String), bool> = BTreeMap::new();
    for r in records {
        let key = (r.relation_id.clone(), r.subject.clone(), r.object.clone());
        let ok = r.prediction == r.object;
        out.entry(key).and_modify(|v| *v &= ok).or_insert(ok);
    }
    out
}

/// Rebuilds prediction tables from a dump, given the relation metadata.
pub fn tables_from_records(
    relations: &[Relation],
    records: &[PredictionRecord],
) -> Result<Vec<PredictionTable>> {
    let mut by_rel: BTreeMap<&str, BTreeMap<(&str, &str), BTreeMap<usize, &str>>> = BTreeMap::new();
    for r in records {
        by_rel
            .entry(&r.relation_id)
            .or_default()
            .entry((&r.subject, &r.object))
            .or_default()
            .insert(r.pattern_index, &r.prediction);
    }
    let mut tables = Vec::new();
    for rel in relations {
        let Some(rows) = by_rel.get(rel.id.as_str()) else { continue };
        let mut table_rows = Vec::new();
        for ((subject, object), preds) in rows {
            let predictions: Vec<String> = (0..rel.patterns.len())
                .map(|i| {
                    preds.get(&i).map(|p| p.to_string()).ok_or_else(|| {
                        Error::invalid(format!("{}: {subject} lacks pattern {i}", rel.id))
                    })
                })
                .collect::<Result<_>>()?;
            table_rows.push(TupleRow {
                subject: subject.to_string(),
                gold: object.to_string(),
                predictions,
            });
        }
        tables.push(PredictionTable::new(
            rel.id.clone(),
            rel.cardinality,
            PatternMeta::from_relation(rel),
            rel.candidates.clone(),
            table_rows,
        )?);
    }
    Ok(tables)
}
