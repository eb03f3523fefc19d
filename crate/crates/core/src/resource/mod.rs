//! Pattern resources, KB tuples and cloze population.
//!
//! A resource is a directory holding one JSON file per relation:
//!
//! ```json
//! {"relation_id": "P36", "name": "capital", "cardinality": "N1",
//!  "patterns": [{"template": "The capital of [X] is [Y] .", "is_base": true,
//!                "lex_group": 1, "syn_group": 1, "para_type": null}]}
//! ```
//!
//! Tuples live in a JSONL file with one `{"relation_id", "subject", "object"}`
//! record per line.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{build_vocabulary, generate_synth_kb, write_synth_kb, SynthKb};

pub const SUBJECT_SLOT: &str = "[X]";
pub const OBJECT_SLOT: &str = "[Y]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cardinality {
    #[serde(rename = "N1")]
    NToOne,
    #[serde(rename = "NM")]
    NToMany,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub template: String,
    pub is_base: bool,
    pub lex_group: i64,
    pub syn_group: i64,
    #[serde(default)]
    pub para_type: Option<String>,
}

impl Pattern {
    pub fn new(template: impl Into<String>, is_base: bool, lex_group: i64, syn_group: i64) -> Self {
        Pattern {
            template: template.into(),
            is_base,
            lex_group,
            syn_group,
            para_type: None,
        }
    }

    /// Checks the placeholder invariant: exactly one `[X]` and one `[Y]`.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let xs = self.template.matches(SUBJECT_SLOT).count();
        let ys = self.template.matches(OBJECT_SLOT).count();
        if xs != 1 || ys != 1 {
            return Err(format!(
                "template {:?} must contain exactly one {SUBJECT_SLOT} and one {OBJECT_SLOT} (found {xs} and {ys})",
                self.template
            ));
        }
        Ok(())
    }

    /// Substitutes both slots in a single pass over the template, so slot
    /// markers inside the substituted strings are never re-expanded.
    pub fn fill(&self, subject: &str, object: &str) -> String {
        let mut out = String::with_capacity(self.template.len() + subject.len() + object.len());
        let mut rest = self.template.as_str();
        loop {
            let x = rest.find(SUBJECT_SLOT);
            let y = rest.find(OBJECT_SLOT);
            let (at, value) = match (x, y) {
                (Some(x), Some(y)) if x < y => (x, subject),
                (Some(_), Some(y)) => (y, object),
                (Some(x), None) => (x, subject),
                (None, Some(y)) => (y, object),
                (None, None) => break,
            };
            out.push_str(&rest[..at]);
            out.push_str(value);
            rest = &rest[at + 3..];
        }
        out.push_str(rest);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    #[serde(rename = "relation_id")]
    pub id: String,
    pub name: String,
    pub cardinality: Cardinality,
    pub patterns: Vec<Pattern>,
    /// Filled by [`build_candidates`]; not part of the relation file.
    #[serde(default, skip_serializing)]
    pub candidates: Vec<String>,
}

impl Relation {
    pub fn base_index(&self) -> Option<usize> {
        self.patterns.iter().position(|p| p.is_base)
    }

    /// Consistency needs at least one pattern pair.
    pub fn is_consistency_eligible(&self) -> bool {
        self.patterns.len() >= 2
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty relation_id".into());
        }
        if self.patterns.is_empty() {
            return Err(format!("relation {} has no patterns", self.id));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            p.validate().map_err(|e| format!("pattern {i}: {e}"))?;
        }
        let bases: Vec<usize> = self
            .patterns
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_base)
            .map(|(i, _)| i)
            .collect();
        match bases.len() {
            1 => Ok(()),
            0 => Err(format!("relation {} has no base pattern", self.id)),
            _ => Err(format!(
                "relation {} has {} base patterns (indices {:?}); exactly one is allowed",
                self.id,
                bases.len(),
                bases
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KBTuple {
    pub relation_id: String,
    pub subject: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PopulatedCloze {
    pub text: String,
    pub relation_id: String,
    pub pattern_index: usize,
    pub subject: String,
}

/// Summary statistics of a loaded resource.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceStats {
    pub relations: usize,
    pub patterns: usize,
    pub min_patterns: usize,
    pub max_patterns: usize,
    pub avg_patterns: f64,
    pub avg_syntax_groups: f64,
    pub avg_lexical_groups: f64,
}

impl ResourceStats {
    pub fn compute(relations: &[Relation]) -> Option<Self> {
        if relations.is_empty() {
            return None;
        }
        let n = relations.len() as f64;
        let counts: Vec<usize> = relations.iter().map(|r| r.patterns.len()).collect();
        let distinct = |f: fn(&Pattern) -> i64| -> f64 {
            relations
                .iter()
                .map(|r| r.patterns.iter().map(f).collect::<BTreeSet<_>>().len() as f64)
                .sum::<f64>()
                / n
        };
        Some(ResourceStats {
            relations: relations.len(),
            patterns: counts.iter().sum(),
            min_patterns: *counts.iter().min().unwrap(),
            max_patterns: *counts.iter().max().unwrap(),
            avg_patterns: counts.iter().sum::<usize>() as f64 / n,
            avg_syntax_groups: distinct(|p| p.syn_group),
            avg_lexical_groups: distinct(|p| p.lex_group),
        })
    }
}

/// Loads every `*.json` relation file under `dir`, sorted by file name.
pub fn load_resource(dir: &Path) -> Result<Vec<Relation>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::load(dir, "no relation files (*.json) found"));
    }

    let mut relations = Vec::with_capacity(files.len());
    let mut seen = HashSet::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let relation: Relation =
            serde_json::from_str(&text).map_err(|e| Error::load(&file, e.to_string()))?;
        relation.validate().map_err(|msg| Error::load(&file, msg))?;
        if !seen.insert(relation.id.clone()) {
            return Err(Error::load(&file, format!("duplicate relation_id {}", relation.id)));
        }
        relations.push(relation);
    }
    Ok(relations)
}

/// Writes one `<relation_id>.json` file per relation.
pub fn write_resource(dir: &Path, relations: &[Relation]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in relations {
        let path = dir.join(format!("{}.json", r.id));
        let mut text = serde_json::to_string_pretty(r)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Default)]
pub struct TupleLoad {
    pub tuples: Vec<KBTuple>,
    pub rejected_unknown_relation: usize,
    pub line_errors: Vec<LineError>,
}

#[derive(Deserialize)]
struct RawTuple {
    relation_id: Option<String>,
    subject: Option<String>,
    object: Option<String>,
}

/// Loads a JSONL tuple file. Bad lines are reported and skipped.
pub fn load_tuples(path: &Path, relations: &[Relation]) -> Result<TupleLoad> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let known: HashSet<&str> = relations.iter().map(|r| r.id.as_str()).collect();
    let mut out = TupleLoad::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_tuple_line(&line) {
            Ok(t) if !known.contains(t.relation_id.as_str()) => out.rejected_unknown_relation += 1,
            Ok(t) => out.tuples.push(t),
            Err(msg) => out.line_errors.push(LineError { line: line_no, msg }),
        }
    }
    Ok(out)
}

fn parse_tuple_line(line: &str) -> std::result::Result<KBTuple, String> {
    let raw: RawTuple = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let field = |v: Option<String>, name: &str| match v {
        None => Err(format!("missing field {name}")),
        Some(s) if s.trim().is_empty() => Err(format!("empty {name}")),
        Some(s) => Ok(s),
    };
    let tuple = KBTuple {
        relation_id: field(raw.relation_id, "relation_id")?,
        subject: field(raw.subject, "subject")?,
        object: field(raw.object, "object")?,
    };
    if tuple.subject.contains(OBJECT_SLOT) {
        return Err(format!("subject {:?} contains {OBJECT_SLOT}", tuple.subject));
    }
    Ok(tuple)
}

pub fn write_tuples(path: &Path, tuples: &[KBTuple]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in tuples {
        let line = serde_json::to_string(t)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Groups tuples by relation id, preserving file order within a relation.
pub fn group_by_relation(tuples: &[KBTuple]) -> BTreeMap<String, Vec<KBTuple>> {
    let mut groups: BTreeMap<String, Vec<KBTuple>> = BTreeMap::new();
    for t in tuples {
        groups.entry(t.relation_id.clone()).or_default().push(t.clone());
    }
    groups
}

/// Returns a copy of `relation` whose candidate set is the sorted,
/// deduplicated set of gold objects among its tuples.
pub fn build_candidates(relation: &Relation, tuples: &[KBTuple]) -> Result<Relation> {
    let objects: BTreeSet<&str> = tuples
        .iter()
        .filter(|t| t.relation_id == relation.id)
        .map(|t| t.object.as_str())
        .collect();
    if objects.is_empty() {
        return Err(Error::invalid(format!("relation {} has no tuples", relation.id)));
    }
    let mut out = relation.clone();
    out.candidates = objects.into_iter().map(str::to_owned).collect();
    Ok(out)
}

/// Fills `[X]` with the subject and `[Y]` with the mask token.
pub fn populate(
    relation: &Relation,
    pattern_index: usize,
    subject: &str,
    mask_token: &str,
) -> Result<PopulatedCloze> {
    let pattern = relation.patterns.get(pattern_index).ok_or_else(|| {
        Error::invalid(format!(
            "relation {} has no pattern {pattern_index}",
            relation.id
        ))
    })?;
    if subject.trim().is_empty() {
        return Err(Error::invalid("empty subject"));
    }
    if subject.contains(OBJECT_SLOT) {
        return Err(Error::invalid(format!("subject {subject:?} contains {OBJECT_SLOT}")));
    }
    Ok(PopulatedCloze {
        text: pattern.fill(subject, mask_token),
        relation_id: relation.id.clone(),
        pattern_index,
        subject: subject.to_owned(),
    })
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub tuples: Vec<KBTuple>,
    pub retained: usize,
    pub removed: usize,
}

/// Keeps a tuple iff every scorer reports its object as a single token.
pub fn single_token_filter(
    tuples: &[KBTuple],
    verdicts: &[HashMap<String, bool>],
) -> Result<FilterOutcome> {
    let mut missing = BTreeSet::new();
    for t in tuples {
        for v in verdicts {
            if !v.contains_key(&t.object) {
                missing.insert(t.object.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "missing single-token verdict for: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let kept: Vec<KBTuple> = tuples
        .iter()
        .filter(|t| verdicts.iter().all(|v| v[&t.object]))
        .cloned()
        .collect();
    Ok(FilterOutcome {
        retained: kept.len(),
        removed: tuples.len() - kept.len(),
        tuples: kept,
    })
}

#[derive(Debug, Clone)]
pub struct RelationSplit {
    pub train: Vec<Relation>,
    pub val: Vec<Relation>,
    pub test: Vec<Relation>,
}

/// Partitions relations into train / validation / test (the remainder).
pub fn split_relations(
    relations: &[Relation],
    train_ids: &[String],
    val_ids: &[String],
) -> Result<RelationSplit> {
    let known: HashSet<&str> = relations.iter().map(|r| r.id.as_str()).collect();
    for id in train_ids.iter().chain(val_ids) {
        if !known.contains(id.as_str()) {
            return Err(Error::invalid(format!("unknown relation id {id}")));
        }
    }
    let train: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let val: HashSet<&str> = val_ids.iter().map(String::as_str).collect();
    if let Some(id) = train.intersection(&val).next() {
        return Err(Error::invalid(format!(
            "relation {id} is in both the train and validation sets"
        )));
    }
    let pick = |set: &HashSet<&str>| -> Vec<Relation> {
        relations
            .iter()
            .filter(|r| set.contains(r.id.as_str()))
            .cloned()
            .collect()
    };
    Ok(RelationSplit {
        train: pick(&train),
        val: pick(&val),
        test: relations
            .iter()
            .filter(|r| !train.contains(r.id.as_str()) && !val.contains(r.id.as_str()))
            .cloned()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(id: &str, templates: &[&str]) -> Relation {
        Relation {
            id: id.into(),
            name: id.into(),
            cardinality: Cardinality::NToOne,
            patterns: templates
                .iter()
                .enumerate()
                .map(|(i, t)| Pattern::new(*t, i == 0, i as i64, 0))
                .collect(),
            candidates: vec![],
        }
    }

    fn tuple(r: &str, s: &str, o: &str) -> KBTuple {
        KBTuple {
            relation_id: r.into(),
            subject: s.into(),
            object: o.into(),
        }
    }

    fn write_rel(dir: &Path, name: &str, json: &str) {
        fs::write(dir.join(name), json).unwrap();
    }

    #[test]
    fn loads_single_relation_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_resource(dir.path(), &[rel("P19", &["[X] was born in [Y] .", "[X] is from [Y] ."])]).unwrap();
        let rels = load_resource(dir.path()).unwrap();
        assert_eq!(rels.len(), 1);
        assert_eq!(rels[0].patterns.len(), 2);
        let stats = ResourceStats::compute(&rels).unwrap();
        assert_eq!((stats.relations, stats.patterns), (1, 2));
        assert_eq!((stats.min_patterns, stats.max_patterns), (2, 2));
    }

    #[test]
    fn missing_object_slot_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write_rel(
            dir.path(),
            "P19.json",
            r#"{"relation_id":"P19","name":"born","cardinality":"N1","patterns":[
                {"template":"[X] born in","is_base":true,"lex_group":1,"syn_group":1}]}"#,
        );
        let err = load_resource(dir.path()).unwrap_err().to_string();
        assert!(err.contains("P19.json"), "{err}");
        assert!(err.contains("[X] born in"), "{err}");
    }

    #[test]
    fn duplicate_placeholder_and_base_are_rejected() {
        let mut r = rel("P1", &["[X] [X] [Y]", "[X] and [Y]"]);
        assert!(r.validate().is_err());
        r.patterns[0].template = "[X] is [Y]".into();
        r.patterns[1].is_base = true;
        assert!(r.validate().unwrap_err().contains("base patterns"));
    }

    #[test]
    fn unknown_cardinality_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_rel(
            dir.path(),
            "P2.json",
            r#"{"relation_id":"P2","name":"x","cardinality":"1-1","patterns":[
                {"template":"[X] [Y]","is_base":true,"lex_group":1,"syn_group":1}]}"#,
        );
        assert!(matches!(load_resource(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn tuple_loading_counts_unknown_relations_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut lines = Vec::new();
        for i in 0..8 {
            lines.push(format!(r#"{{"relation_id":"P36","subject":"S{i}","object":"O"}}"#));
        }
        lines.push(r#"{"relation_id":"P999","subject":"a","object":"b"}"#.into());
        lines.push(r#"{"relation_id":"P998","subject":"a","object":"b"}"#.into());
        fs::write(&path, lines.join("\n")).unwrap();
        let load = load_tuples(&path, &[rel("P36", &["[X] [Y]"])]).unwrap();
        assert_eq!(load.tuples.len(), 8);
        assert_eq!(load.rejected_unknown_relation, 2);

        fs::write(
            &path,
            "{\"relation_id\":\"P36\",\"subject\":\"Wales\",\"object\":\"Cardiff\"}\n\
             {\"relation_id\":\"P36\",\"subject\":\"\",\"object\":\"x\"}\n\
             {\"relation_id\":\"P36\",\"object\":\"x\"}\n",
        )
        .unwrap();
        let load = load_tuples(&path, &[rel("P36", &["[X] [Y]"])]).unwrap();
        assert_eq!(load.tuples, vec![tuple("P36", "Wales", "Cardiff")]);
        assert_eq!(load.line_errors.len(), 2);
        assert_eq!(load.line_errors[0].line, 2);

        fs::write(&path, "").unwrap();
        assert!(load_tuples(&path, &[]).unwrap().tuples.is_empty());
    }

    #[test]
    fn candidates_are_sorted_and_deduplicated() {
        let r = rel("P449", &["[X] [Y]"]);
        let ts = vec![
            tuple("P449", "a", "Showtime"),
            tuple("P449", "b", "NBC"),
            tuple("P449", "c", "Showtime"),
        ];
        assert_eq!(build_candidates(&r, &ts).unwrap().candidates, vec!["NBC", "Showtime"]);
        assert!(build_candidates(&r, &[]).is_err());

        let many: Vec<KBTuple> = (0..1000)
            .map(|i| tuple("P449", &format!("s{i}"), &format!("o{}", i % 50)))
            .collect();
        assert_eq!(build_candidates(&r, &many).unwrap().candidates.len(), 50);
    }

    #[test]
    fn populate_fills_both_slots() {
        let r = rel("P19", &["[X] was born in [Y].", "[Y] borders with [X]."]);
        let c = populate(&r, 0, "Adriaan Pauw", "[MASK]").unwrap();
        assert_eq!(c.text, "Adriaan Pauw was born in [MASK].");
        let c = populate(&r, 1, "Albania", "[MASK]").unwrap();
        assert_eq!(c.text, "[MASK] borders with Albania.");
        assert_eq!(c.text.matches("Albania").count(), 1);
        assert!(populate(&r, 0, "bad [Y] subject", "[MASK]").is_err());
        assert!(populate(&r, 0, "", "[MASK]").is_err());
    }

    #[test]
    fn fill_does_not_reexpand_slots_inside_values() {
        let p = Pattern::new("[X] is [Y]", true, 0, 0);
        assert_eq!(p.fill("[Y]", "[X]"), "[Y] is [X]");
    }

    #[test]
    fn single_token_filter_intersects_scorers() {
        let ts = vec![tuple("P36", "Wales", "Cardiff"), tuple("P36", "Lux", "Luxembourg City")];
        let a: HashMap<String, bool> =
            [("Cardiff".into(), true), ("Luxembourg City".into(), false)].into();
        let b: HashMap<String, bool> =
            [("Cardiff".into(), false), ("Luxembourg City".into(), false)].into();
        let out = single_token_filter(&ts, &[a.clone()]).unwrap();
        assert_eq!((out.retained, out.removed), (1, 1));
        let out = single_token_filter(&ts, &[a, b]).unwrap();
        assert_eq!(out.retained, 0);

        let all: HashMap<String, bool> =
            [("Cardiff".into(), true), ("Luxembourg City".into(), true)].into();
        assert_eq!(single_token_filter(&ts, &[all]).unwrap().tuples, ts);

        let partial: HashMap<String, bool> = [("Cardiff".into(), true)].into();
        let err = single_token_filter(&ts, &[partial]).unwrap_err().to_string();
        assert!(err.contains("Luxembourg City"));
    }

    #[test]
    fn split_is_a_partition() {
        let rels: Vec<Relation> = (0..10).map(|i| rel(&format!("R{i}"), &["[X] [Y]"])).collect();
        let ids = |xs: &[usize]| xs.iter().map(|i| format!("R{i}")).collect::<Vec<_>>();
        let s = split_relations(&rels, &ids(&[0, 1]), &ids(&[2, 3])).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 2, 6));
        let s = split_relations(&rels, &[], &[]).unwrap();
        assert_eq!(s.test.len(), 10);
        assert!(split_relations(&rels, &ids(&[0]), &ids(&[0])).is_err());
        assert!(split_relations(&rels, &["nope".into()], &[]).is_err());
    }
}
