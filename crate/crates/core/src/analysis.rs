//! Representation clustering and paired significance tests.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};
use crate::resource::{populate, KBTuple, Relation};
use crate::scorer::{ScoreRequest, Scorer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment and every centroid update.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn inertia(vectors: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    vectors
        .iter()
        .zip(assignment)
        .map(|(v, &a)| sq_dist(v, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm from `k` distinct seeded sample points.
///
/// An empty cluster takes the point farthest from its current centroid; if
/// every point already sits on its centroid the cluster stays empty, so
/// duplicate points are never split apart.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > vectors.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of vectors ({})",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::invalid("vectors differ in dimensionality"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, vectors.len(), k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| vectors[i].clone()).collect();
    let mut assignment = vec![usize::MAX; vectors.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        for (v, a) in vectors.iter().zip(assignment.iter_mut()) {
            let (j, _) = nearest(v, &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let (far, dist) = vectors
                .iter()
                .enumerate()
                .filter(|&(i, _)| counts[assignment[i]] > 1)
                .map(|(i, v)| (i, sq_dist(v, &centroids[assignment[i]])))
                .fold((usize::MAX, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far != usize::MAX && dist > 0.0 {
                counts[assignment[far]] -= 1;
                assignment[far] = j;
                counts[j] = 1;
                centroids[j] = vectors[far].clone();
                changed = true;
            }
        }
        trace.push(inertia(vectors, &centroids, &assignment));

        for (j, centroid) in centroids.iter_mut().enumerate() {
            if counts[j] == 0 {
                continue;
            }
            let mut sum = vec![0.0; dim];
            for (v, _) in vectors.iter().zip(&assignment).filter(|(_, &a)| a == j) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
            }
            *centroid = sum.into_iter().map(|s| s / counts[j] as f64).collect();
        }
        trace.push(inertia(vectors, &centroids, &assignment));

        if !changed {
            break;
        }
    }

    for w in trace.windows(2) {
        debug_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "inertia increased: {w:?}");
    }
    Ok(KMeansResult {
        inertia: inertia(vectors, &centroids, &assignment),
        assignment,
        centroids,
        iterations,
        inertia_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean (natural-log entropies).
pub fn v_measure_scores<A, B>(assignment: &[A], labels: &[B]) -> Result<VMeasure>
where
    A: Ord + Clone,
    B: Ord + Clone,
{
    if assignment.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} assignments for {} labels",
            assignment.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    if labels.is_empty() {
        return Ok(VMeasure {
            homogeneity: 1.0,
            completeness: 1.0,
            v_measure: 1.0,
        });
    }
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<A, usize> = BTreeMap::new();
    let mut by_class: BTreeMap<B, usize> = BTreeMap::new();
    for (a, b) in assignment.iter().zip(labels) {
        *joint.entry((a.clone(), b.clone())).or_default() += 1;
        *by_cluster.entry(a.clone()).or_default() += 1;
        *by_class.entry(b.clone()).or_default() += 1;
    }
    let h_class = entropy(by_class.values().copied(), n);
    let h_cluster = entropy(by_cluster.values().copied(), n);
    // H(C|K) = -sum n_ck/n ln(n_ck/n_k); H(K|C) symmetrically
    let mut h_class_given_cluster = 0.0;
    let mut h_cluster_given_class = 0.0;
    for ((a, b), &c) in &joint {
        let c = c as f64;
        h_class_given_cluster -= c / n * (c / by_cluster[a] as f64).ln();
        h_cluster_given_class -= c / n * (c / by_class[b] as f64).ln();
    }
    let homogeneity = if h_class == 0.0 { 1.0 } else { 1.0 - h_class_given_cluster / h_class };
    let completeness = if h_cluster == 0.0 { 1.0 } else { 1.0 - h_cluster_given_class / h_cluster };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v_measure,
    })
}

pub fn v_measure<A: Ord + Clone, B: Ord + Clone>(assignment: &[A], labels: &[B]) -> Result<f64> {
    v_measure_scores(assignment, labels).map(|v| v.v_measure)
}

/// 1-based ranks; ties share the average of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for a constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TestMethod {
    McnemarChi2,
    McnemarExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
}

/// Below this many discordant pairs the exact binomial test is used.
pub const MCNEMAR_EXACT_BELOW: u64 = 25;

/// Two-sided McNemar test on discordant counts `b` and `c`.
pub fn mcnemar(b: u64, c: u64) -> TestResult {
    let n = b + c;
    if n == 0 {
        return TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: TestMethod::McnemarExact,
        };
    }
    if n < MCNEMAR_EXACT_BELOW {
        mcnemar_exact(b, c)
    } else {
        mcnemar_chi2(b, c)
    }
}

/// Exact two-sided binomial test: `min(1, 2 P(X <= min(b, c)))`, X ~ Bin(b+c, 1/2).
/// The reported statistic is the continuity-corrected chi-squared value.
pub fn mcnemar_exact(b: u64, c: u64) -> TestResult {
    let n = b + c;
    let p_value = if n == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        (2.0 * dist.cdf(b.min(c))).min(1.0)
    };
    TestResult {
        statistic: mcnemar_chi2(b, c).statistic,
        p_value,
        method: TestMethod::McnemarExact,
    }
}

/// Continuity-corrected chi-squared with one degree of freedom.
pub fn mcnemar_chi2(b: u64, c: u64) -> TestResult {
    let n = (b + c) as f64;
    let statistic = if n == 0.0 {
        0.0
    } else {
        let diff = (b as f64 - c as f64).abs() - 1.0;
        diff.max(0.0).powi(2) / n
    };
    let p_value = ChiSquared::new(1.0).expect("valid df").sf(statistic).clamp(0.0, 1.0);
    TestResult {
        statistic,
        p_value,
        method: TestMethod::McnemarChi2,
    }
}

/// Discordant counts between two paired correctness vectors:
/// `b` = first right and second wrong, `c` = the converse.
pub fn discordant_counts(first: &[bool], second: &[bool]) -> Result<(u64, u64)> {
    if first.len() != second.len() {
        return Err(Error::invalid("correctness vectors differ in length"));
    }
    let b = first.iter().zip(second).filter(|(a, b)| **a && !**b).count() as u64;
    let c = first.iter().zip(second).filter(|(a, b)| !**a && **b).count() as u64;
    Ok((b, c))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingSet {
    pub relation_id: String,
    pub vectors: Vec<Vec<f64>>,
    pub pattern_labels: Vec<usize>,
    pub subject_labels: Vec<String>,
}

impl EmbeddingSet {
    /// TSV with a header row: relation, pattern_index, subject, d0..d{n-1}.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.vectors.first().map_or(0, Vec::len);
        let mut header = vec!["relation".to_string(), "pattern_index".into(), "subject".into()];
        header.extend((0..dim).map(|i| format!("d{i}")));
        writeln!(out, "{}", header.join("\t"))?;
        for ((v, p), s) in self.vectors.iter().zip(&self.pattern_labels).zip(&self.subject_labels) {
            let mut row = vec![self.relation_id.clone(), p.to_string(), s.replace('\t', " ")];
            row.extend(v.iter().map(|x| format!("{x:?}")));
            writeln!(out, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringScores {
    pub k: usize,
    pub vs_patterns: VMeasure,
    pub vs_subjects: VMeasure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationStudy {
    pub relation_id: String,
    pub model_id: String,
    pub seed: u64,
    pub init: &'static str,
    /// k = number of patterns.
    pub pattern_clustering: ClusteringScores,
    /// k = number of subjects.
    pub subject_clustering: ClusteringScores,
    pub pattern_vmeasure: f64,
    pub subject_vmeasure: f64,
}

/// Encodes every (pattern, subject) cloze of a relation, clusters the
/// mask-position vectors with k = #patterns and k = #subjects, and scores
/// both clusterings against both labelings.
pub fn representation_study(
    scorer: &dyn Scorer,
    relation: &Relation,
    tuples: &[KBTuple],
    seed: u64,
    max_iter: usize,
) -> Result<(EmbeddingSet, RepresentationStudy)> {
    if !scorer.supports_hidden() {
        return Err(Error::Scorer {
            scorer: scorer.model_id().to_owned(),
            msg: "hidden-state export is not supported".into(),
        });
    }
    let candidates = if relation.candidates.is_empty() {
        let mut c: Vec<String> = tuples.iter().map(|t| t.object.clone()).collect();
        c.sort();
        c.dedup();
        c
    } else {
        relation.candidates.clone()
    };
    let tuples: Vec<&KBTuple> = tuples.iter().filter(|t| t.relation_id == relation.id).collect();
    if tuples.is_empty() {
        return Err(Error::invalid(format!("relation {} has no tuples", relation.id)));
    }

    let mut set = EmbeddingSet {
        relation_id: relation.id.clone(),
        vectors: vec![],
        pattern_labels: vec![],
        subject_labels: vec![],
    };
    for t in &tuples {
        for p in 0..relation.patterns.len() {
            let cloze = populate(relation, p, &t.subject, scorer.mask_token())?;
            let req = ScoreRequest::new(cloze.text, candidates.clone())
                .with_hidden()
                .for_relation(&relation.id);
            let hidden = scorer.score(&req)?.hidden.ok_or_else(|| Error::Scorer {
                scorer: scorer.model_id().to_owned(),
                msg: "response lacks a hidden vector".into(),
            })?;
            set.vectors.push(hidden);
            set.pattern_labels.push(p);
            set.subject_labels.push(t.subject.clone());
        }
    }

    let mut subject_ids: HashMap<&str, usize> = HashMap::new();
    for s in &set.subject_labels {
        let next = subject_ids.len();
        subject_ids.entry(s.as_str()).or_insert(next);
    }
    let subjects: Vec<usize> = set.subject_labels.iter().map(|s| subject_ids[s.as_str()]).collect();

    let score_k = |k: usize| -> Result<ClusteringScores> {
        let km = kmeans(&set.vectors, k, seed, max_iter)?;
        Ok(ClusteringScores {
            k,
            vs_patterns: v_measure_scores(&km.assignment, &set.pattern_labels)?,
            vs_subjects: v_measure_scores(&km.assignment, &subjects)?,
        })
    };
    let pattern_clustering = score_k(relation.patterns.len())?;
    let subject_clustering = score_k(subject_ids.len())?;
    let study = RepresentationStudy {
        relation_id: relation.id.clone(),
        model_id: scorer.model_id().to_owned(),
        seed,
        init: "seeded sample of k distinct points",
        pattern_vmeasure: pattern_clustering.vs_patterns.v_measure,
        subject_vmeasure: subject_clustering.vs_subjects.v_measure,
        pattern_clustering,
        subject_clustering,
    };
    Ok((set, study))
}
