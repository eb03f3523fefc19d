//! Seeded synthetic KB: a desk-scale stand-in for a real pattern resource
//! and its tuples.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_resource, write_tuples, Cardinality, KBTuple, Pattern, Relation};
use crate::error::{Error, Result};
use crate::scorer::{tokenize, MASK_TOKEN, UNK_TOKEN};

/// Sentence skeletons shared by every relation. `{R}` is the relation word.
const FRAMES: &[&str] = &[
    "[X] {R} [Y] .",
    "[Y] is the {R} of [X] .",
    "the {R} of [X] is [Y] .",
    "[X] has {R} [Y] .",
    "[X] is known for {R} [Y] .",
    "[Y] was {R} by [X] .",
    "for [X] the {R} is [Y] .",
    "[X] and its {R} [Y] .",
];

const LEX_SUFFIXES: &[&str] = &["", "x", "y", "z", "w", "v", "u", "t"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthKb {
    pub relations: Vec<Relation>,
    pub tuples: Vec<KBTuple>,
    /// Special tokens first, then every other token in sorted order.
    pub vocabulary: Vec<String>,
}

/// Generates `n_relations` N-1 relations over `n_entities` entities, each
/// with `n_patterns_per_relation` paraphrase templates.
///
/// Pattern `j` uses frame `j mod 8` (its syntax group) and lexical variant
/// `j / 2` of the relation word (its lexical group); pattern 0 is the base.
/// Each relation draws a small object pool and maps a disjoint set of
/// subjects to objects in that pool, so every subject has exactly one gold
/// object.
pub fn generate_synth_kb(
    seed: u64,
    n_relations: usize,
    n_entities: usize,
    n_patterns_per_relation: usize,
) -> SynthKb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..n_entities).map(|i| format!("ent{i:02}")).collect();
    let n_objects = (n_entities / 8).clamp(2, (n_entities / 2).max(2)).min(n_entities);
    let mut shuffled: Vec<&String> = entities.iter().collect();
    shuffled.shuffle(&mut rng);
    let disjoint_objects = n_relations * n_objects <= n_entities;

    let mut relations = Vec::with_capacity(n_relations);
    let mut tuples = Vec::new();
    for r in 0..n_relations {
        let id = format!("R{r}");
        let patterns = (0..n_patterns_per_relation)
            .map(|j| {
                let lex = (j / 2) % LEX_SUFFIXES.len();
                let word = format!("rel{r}{}", LEX_SUFFIXES[lex]);
                let frame = j % FRAMES.len();
                let mut p = Pattern::new(FRAMES[frame].replace("{R}", &word), j == 0, lex as i64, frame as i64);
                p.para_type = Some(if lex == 0 { "syntactic" } else { "lexical+syntactic" }.into());
                p
            })
            .collect();

        let objects: Vec<&String> = if disjoint_objects {
            shuffled[r * n_objects..(r + 1) * n_objects].to_vec()
        } else {
            let mut pool: Vec<&String> = entities.iter().collect();
            pool.shuffle(&mut rng);
            pool.truncate(n_objects);
            pool
        };
        let subjects: Vec<&String> = entities.iter().filter(|e| !objects.contains(e)).collect();
        let mut rel_tuples: Vec<KBTuple> = subjects
            .iter()
            .map(|s| KBTuple {
                relation_id: id.clone(),
                subject: (*s).clone(),
                object: objects[rng.random_range(0..objects.len())].clone(),
            })
            .collect();
        rel_tuples.sort();
        tuples.extend(rel_tuples);

        relations.push(Relation {
            id,
            name: format!("relation-{r}"),
            cardinality: Cardinality::NToOne,
            patterns,
            candidates: vec![],
        });
    }

    let mut words = BTreeSet::new();
    for rel in &relations {
        for p in &rel.patterns {
            words.extend(tokenize(&p.fill("", "")));
        }
    }
    words.extend(entities.iter().cloned());
    let mut vocabulary = vec![MASK_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
    vocabulary.extend(words.into_iter().filter(|w| w != MASK_TOKEN && w != UNK_TOKEN));

    SynthKb {
        relations,
        tuples,
        vocabulary,
    }
}

/// Special tokens followed by the sorted tokens of every pattern, subject
/// and object.
pub fn build_vocabulary(relations: &[Relation], tuples: &[KBTuple]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for rel in relations {
        for p in &rel.patterns {
            words.extend(tokenize(&p.fill("", "")));
        }
    }
    for t in tuples {
        words.extend(tokenize(&t.subject));
        words.extend(tokenize(&t.object));
    }
    let mut vocabulary = vec![MASK_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
    vocabulary.extend(words.into_iter().filter(|w| w != MASK_TOKEN && w != UNK_TOKEN));
    vocabulary
}

/// Writes `resource/`, `tuples.jsonl` and `vocab.txt` under `dir`.
pub fn write_synth_kb(dir: &Path, kb: &SynthKb) -> Result<()> {
    write_resource(&dir.join("resource"), &kb.relations)?;
    write_tuples(&dir.join("tuples.jsonl"), &kb.tuples)?;
    let vocab_path = dir.join("vocab.txt");
    let mut text = kb.vocabulary.join("\n");
    text.push('\n');
    fs::write(&vocab_path, text).map_err(|e| Error::io(&vocab_path, e))
}
