//! Consistency-regularized continued training of the toy MLM.
//!
//! The objective for a batch of tuples from one relation is
//!
//! ```text
//! L = (1/B) * sum_tuples [ lambda * L_c + L_mlm ]
//! L_c = sum_{n<m} KL(Q_n || Q_m) + KL(Q_m || Q_n)
//! ```
//!
//! where `Q_n` is the softmax of the mask logits of pattern `n`, restricted to
//! the relation's candidates unless the typed restriction is switched off,
//! and `L_mlm` is the mean cross-entropy over the masked tokens of all the
//! tuple's filled patterns. With [`PairReduction::Mean`] the pair sum is
//! divided by the number of pairs. Gradients are analytic and flow through
//! [`ToyMLM::backward`].

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, relation_report, AggregateMode};
use crate::probe::predict_relation;
use crate::resource::{group_by_relation, KBTuple, Pattern, Relation};
use crate::scorer::{ToyMLM, ToyParams, MASK_TOKEN};

/// Probability floor inside the KL logarithms.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairReduction {
    /// Divide the pair sum by the number of pattern pairs.
    Mean,
    /// The plain sum over pattern pairs.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub tuples_per_batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Restrict `Q_n` to the relation's candidates (the "typed" loss).
    pub restrict_to_candidates: bool,
    pub use_consistency_loss: bool,
    pub use_mlm_loss: bool,
    pub mlm_mask_rate: f64,
    pub pair_reduction: PairReduction,
    /// Rescale each step's gradient to at most this global norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            epochs: 3,
            tuples_per_batch: 8,
            learning_rate: 0.05,
            seed: 0,
            restrict_to_candidates: true,
            use_consistency_loss: true,
            use_mlm_loss: true,
            mlm_mask_rate: 0.15,
            pair_reduction: PairReduction::Sum,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.tuples_per_batch == 0 {
            return Err(Error::invalid("tuples_per_batch must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_rate) {
            return Err(Error::invalid("mlm_mask_rate must lie in [0, 1]"));
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::invalid("max_grad_norm must be positive"));
        }
        if !self.use_consistency_loss && !self.use_mlm_loss {
            return Err(Error::invalid("at least one loss term must be enabled"));
        }
        Ok(())
    }

    /// The "-consistency" ablation: MLM on the patterns only.
    pub fn without_consistency(mut self) -> Self {
        self.use_consistency_loss = false;
        self
    }

    /// The "-typed" ablation: `Q_n` spans the whole vocabulary.
    pub fn untyped(mut self) -> Self {
        self.restrict_to_candidates = false;
        self
    }

    /// The "-MLM" ablation: consistency loss only.
    pub fn without_mlm(mut self) -> Self {
        self.use_mlm_loss = false;
        self
    }
}

/// Predicted distribution of one pattern over a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDistribution {
    pub probs: Vec<f64>,
    pub pattern_index: usize,
}

impl CandidateDistribution {
    /// Softmax of candidate-restricted logits, floored at [`KL_FLOOR`].
    pub fn from_logits(logits: &[f64], pattern_index: usize) -> Self {
        let probs = log_softmax(logits)
            .into_iter()
            .map(|l| l.exp().max(KL_FLOOR))
            .collect();
        CandidateDistribution {
            probs,
            pattern_index,
        }
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Sum after sorting, so the result does not depend on input order.
fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

/// `KL(p || q) + KL(q || p) = sum_i (p_i - q_i)(ln p_i - ln q_i)`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    sorted_sum(
        p.iter()
            .zip(q)
            .map(|(&a, &b)| (a - b) * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
            .collect(),
    )
}

/// Raw pair sum of two-sided KL divergences over all pattern pairs.
pub fn consistency_loss(distributions: &[CandidateDistribution]) -> Result<f64> {
    consistency_loss_with(distributions, PairReduction::Sum)
}

pub fn consistency_loss_with(
    distributions: &[CandidateDistribution],
    reduction: PairReduction,
) -> Result<f64> {
    if distributions.len() < 2 {
        return Err(Error::invalid("consistency loss needs at least two distributions"));
    }
    let k = distributions[0].probs.len();
    if distributions.iter().any(|d| d.probs.len() != k) {
        return Err(Error::invalid("distributions over different candidate sets"));
    }
    let mut terms = Vec::new();
    for (n, a) in distributions.iter().enumerate() {
        for b in &distributions[n + 1..] {
            terms.push(symmetric_kl(&a.probs, &b.probs));
        }
    }
    let n_pairs = terms.len() as f64;
    let total = sorted_sum(terms);
    Ok(match reduction {
        PairReduction::Sum => total,
        PairReduction::Mean => total / n_pairs,
    })
}

/// Pair loss and its gradient w.r.t. each pattern's restricted logits.
pub fn consistency_loss_grad(logits: &[Vec<f64>], reduction: PairReduction) -> (f64, Vec<Vec<f64>>) {
    let k = logits.len();
    let ls: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| log_softmax(z).into_iter().map(|l| l.max(KL_FLOOR.ln())).collect())
        .collect();
    let ps: Vec<Vec<f64>> = ls.iter().map(|l| l.iter().map(|x| x.exp()).collect()).collect();
    let n_pairs = (k * k.saturating_sub(1) / 2).max(1) as f64;
    let scale = match reduction {
        PairReduction::Sum => 1.0,
        PairReduction::Mean => 1.0 / n_pairs,
    };

    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; logits.first().map_or(0, Vec::len)]; k];
    for n in 0..k {
        for m in 0..k {
            if m == n {
                continue;
            }
            let delta: Vec<f64> = ls[n].iter().zip(&ls[m]).map(|(a, b)| a - b).collect();
            if m > n {
                loss += ps[n].iter().zip(&ps[m]).zip(&delta).map(|((p, q), d)| (p - q) * d).sum::<f64>();
            }
            let mean_delta: f64 = ps[n].iter().zip(&delta).map(|(p, d)| p * d).sum();
            for (j, g) in grads[n].iter_mut().enumerate() {
                *g += scale * (ps[n][j] * (delta[j] - mean_delta) + ps[n][j] - ps[m][j]);
            }
        }
    }
    (loss * scale, grads)
}

/// Full-vocabulary cross-entropy at the single mask of `masked_text`.
pub fn mlm_loss(model: &ToyMLM, masked_text: &str, target_token: &str) -> Result<f64> {
    let target = model
        .token_id(target_token)
        .ok_or_else(|| Error::OutOfVocabulary(target_token.to_owned()))?;
    let (ids, pos) = model.encode_cloze(masked_text)?;
    let (logits, _) = model.toy_forward(&ids, pos)?;
    Ok(-log_softmax(&logits)[target])
}

/// Token ids of a filled pattern and the (position, original id) pairs that
/// are masked: the object slot always, other positions with `mask_rate`.
fn mask_example(
    model: &ToyMLM,
    pattern: &Pattern,
    subject: &str,
    object: &str,
    mask_rate: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let object_id = model
        .token_id(object)
        .ok_or_else(|| Error::OutOfVocabulary(object.to_owned()))?;
    let (mut ids, slot) = model.encode_cloze(&pattern.fill(subject, MASK_TOKEN))?;
    ids[slot] = object_id;
    // One draw per position, so the RNG stream does not depend on the slot.
    let mut targets = Vec::new();
    for (i, &tok) in ids.iter().enumerate() {
        let draw: f64 = rng.random();
        if i == slot || draw < mask_rate {
            targets.push((i, tok));
        }
    }
    for &(i, _) in &targets {
        ids[i] = model.mask_id();
    }
    Ok((ids, targets))
}

/// Summed cross-entropy over `targets`; adds `scale * dL` into `grads`.
fn mlm_grad(model: &ToyMLM, ids: &[usize], targets: &[(usize, usize)], scale: f64, grads: &mut ToyParams) -> Result<f64> {
    let cache = model.forward(ids)?;
    let mut d_logits = Array2::zeros(cache.logits.dim());
    let mut loss = 0.0;
    for &(pos, tok) in targets {
        let row = cache.logits.row(pos);
        let ls = log_softmax(row.as_slice().unwrap());
        loss -= ls[tok];
        for (j, l) in ls.iter().enumerate() {
            d_logits[[pos, j]] = scale * l.exp();
        }
        d_logits[[pos, tok]] -= scale;
    }
    grads.scaled_add(1.0, &model.backward(&cache, &d_logits));
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of the (reduced) pair loss, before lambda weighting.
    pub l_c: f64,
    /// Batch mean of the per-tuple MLM token-mean cross-entropy.
    pub l_mlm: f64,
}

/// Loss and analytic gradient for one batch of tuples from `relation`.
pub fn combined_loss(
    model: &ToyMLM,
    relation: &Relation,
    batch: &[KBTuple],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, ToyParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(t) = batch.iter().find(|t| t.relation_id != relation.id) {
        return Err(Error::invalid(format!(
            "batch mixes relations: {} in a batch for {}",
            t.relation_id, relation.id
        )));
    }
    if config.use_consistency_loss && relation.patterns.len() < 2 {
        return Err(Error::invalid(format!(
            "relation {} has fewer than 2 patterns; consistency loss is undefined",
            relation.id
        )));
    }
    let with_consistency = config.use_consistency_loss && config.lambda > 0.0;
    let candidate_ids: Vec<usize> = if config.restrict_to_candidates {
        if relation.candidates.is_empty() {
            return Err(Error::invalid(format!("relation {} has no candidates", relation.id)));
        }
        relation
            .candidates
            .iter()
            .map(|c| model.token_id(c).ok_or_else(|| Error::OutOfVocabulary(c.clone())))
            .collect::<Result<_>>()?
    } else {
        (0..model.dims().vocab).collect()
    };

    let b = batch.len() as f64;
    let mut grads = ToyParams::zeros(model.dims());
    let (mut l_c, mut l_mlm) = (0.0, 0.0);
    for t in batch {
        if with_consistency {
            let mut caches = Vec::with_capacity(relation.patterns.len());
            let mut restricted = Vec::with_capacity(relation.patterns.len());
            for p in &relation.patterns {
                let (ids, pos) = model.encode_cloze(&p.fill(&t.subject, MASK_TOKEN))?;
                let cache = model.forward(&ids)?;
                restricted.push(candidate_ids.iter().map(|&c| cache.logits[[pos, c]]).collect::<Vec<_>>());
                caches.push((cache, pos));
            }
            let (loss, dz) = consistency_loss_grad(&restricted, config.pair_reduction);
            l_c += loss;
            for ((cache, pos), dz) in caches.iter().zip(dz) {
                let mut d_logits = Array2::zeros(cache.logits.dim());
                for (&c, g) in candidate_ids.iter().zip(dz) {
                    d_logits[[*pos, c]] += config.lambda * g / b;
                }
                grads.scaled_add(1.0, &model.backward(cache, &d_logits));
            }
        }
        if config.use_mlm_loss {
            let masked = relation
                .patterns
                .iter()
                .map(|p| mask_example(model, p, &t.subject, &t.object, config.mlm_mask_rate, rng))
                .collect::<Result<Vec<_>>>()?;
            let n_targets: usize = masked.iter().map(|(_, targets)| targets.len()).sum();
            let scale = 1.0 / (b * n_targets as f64);
            for (ids, targets) in &masked {
                l_mlm += mlm_grad(model, ids, targets, scale, &mut grads)? / n_targets as f64;
            }
        }
    }
    let l_c = l_c / b;
    let l_mlm = l_mlm / b;
    let total = if with_consistency { config.lambda * l_c + l_mlm } else { l_mlm };
    Ok((LossBreakdown { total, l_c, l_mlm }, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteScores {
    pub consistency: Option<f64>,
    pub accuracy: Option<f64>,
    pub consistent_acc: Option<f64>,
}

/// Macro-averaged Consistency, Accuracy and Consistent-Acc of `model` on
/// the given relations (which must carry candidate sets).
pub fn evaluate(model: &ToyMLM, relations: &[Relation], tuples: &[KBTuple]) -> Result<SuiteScores> {
    let groups = group_by_relation(tuples);
    let mut reports = Vec::new();
    for r in relations {
        let Some(ts) = groups.get(&r.id) else { continue };
        reports.push(relation_report(&predict_relation(model, r, ts)?)?);
    }
    if reports.is_empty() {
        return Ok(SuiteScores {
            consistency: None,
            accuracy: None,
            consistent_acc: None,
        });
    }
    let s = aggregate(&reports, AggregateMode::Macro)?;
    Ok(SuiteScores {
        consistency: s.consistency.map(|m| m.mean),
        accuracy: s.accuracy.map(|m| m.mean),
        consistent_acc: s.consistent_acc.map(|m| m.mean),
    })
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub l_c: f64,
    pub l_mlm: f64,
    pub val_consistency: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_consistent_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the best validation Consistent-Acc
    /// (earliest on ties; the last epoch when there is no validation set).
    pub model: ToyMLM,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Batches for one epoch: tuples shuffled within each relation, then
/// relations visited round-robin.
fn epoch_batches<'a>(
    relations: &'a [Relation],
    groups: &BTreeMap<String, Vec<KBTuple>>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<(&'a Relation, Vec<KBTuple>)> {
    let mut per_rel: Vec<Vec<Vec<KBTuple>>> = relations
        .iter()
        .map(|r| {
            let mut ts = groups.get(&r.id).cloned().unwrap_or_default();
            ts.shuffle(rng);
            ts.chunks(batch_size).map(<[KBTuple]>::to_vec).collect()
        })
        .collect();
    let rounds = per_rel.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..rounds {
        for (r, batches) in relations.iter().zip(per_rel.iter_mut()) {
            if i < batches.len() {
                out.push((r, std::mem::take(&mut batches[i])));
            }
        }
    }
    out
}

/// Plain SGD on the combined loss over `train_relations`.
pub fn train(
    model: &ToyMLM,
    train_relations: &[Relation],
    val_relations: &[Relation],
    tuples: &[KBTuple],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ids: HashSet<&str> = train_relations.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = val_relations.iter().find(|r| train_ids.contains(r.id.as_str())) {
        return Err(Error::invalid(format!(
            "relation {} is in both the train and validation sets",
            r.id
        )));
    }
    let groups = group_by_relation(tuples);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model.clone();
    let mut best: Option<(f64, usize, ToyMLM)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let (mut sum, mut sum_c, mut sum_mlm, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (relation, batch) in epoch_batches(train_relations, &groups, config.tuples_per_batch, &mut rng) {
            let (loss, grads) = combined_loss(&current, relation, &batch, config, &mut rng)?;
            step += 1;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: loss.total,
                });
            }
            if config.learning_rate > 0.0 {
                let norm = grads.norm();
                let clip = match config.max_grad_norm {
                    Some(max) if norm > max => max / norm,
                    _ => 1.0,
                };
                current.params.scaled_add(-config.learning_rate * clip, &grads);
            }
            if !current.params.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            sum += loss.total;
            sum_c += loss.l_c;
            sum_mlm += loss.l_mlm;
            n += 1;
        }
        let val = evaluate(&current, val_relations, tuples)?;
        let denom = n.max(1) as f64;
        log.push(EpochLog {
            epoch,
            step,
            loss: sum / denom,
            l_c: sum_c / denom,
            l_mlm: sum_mlm / denom,
            val_consistency: val.consistency,
            val_accuracy: val.accuracy,
            val_consistent_acc: val.consistent_acc,
        });
        let score = if val_relations.is_empty() {
            epoch as f64
        } else {
            val.consistent_acc.unwrap_or(f64::NEG_INFINITY)
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, current.clone()));
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, current),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}

/// The grid value with the highest validation Consistent-Acc; ties and
/// undefined scores resolve to the smaller lambda.
pub fn select_lambda(grid: &[(f64, Option<f64>)]) -> Result<f64> {
    let mut sorted: Vec<(f64, Option<f64>)> = grid.to_vec();
    if sorted.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = sorted[0];
    for &(lambda, score) in &sorted[1..] {
        let s = score.unwrap_or(f64::NEG_INFINITY);
        if s > best.1.unwrap_or(f64::NEG_INFINITY) {
            best = (lambda, score);
        }
    }
    Ok(best.0)
}

/// One filled pattern used for MLM pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample {
    pub pattern: Pattern,
    pub subject: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mlm_mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 0.1,
            mlm_mask_rate: 0.15,
            seed: 0,
        }
    }
}

/// MLM-only SGD over a fixed corpus; returns the trained model and the mean
/// loss of each epoch.
pub fn pretrain(model: &ToyMLM, corpus: &[MlmExample], config: &PretrainConfig) -> Result<(ToyMLM, Vec<f64>)> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = ToyParams::zeros(current.dims());
            let mut loss = 0.0;
            for &i in chunk {
                let ex = &corpus[i];
                let (ids, targets) =
                    mask_example(&current, &ex.pattern, &ex.subject, &ex.object, config.mlm_mask_rate, &mut rng)?;
                let per_token = scale / targets.len() as f64;
                loss += mlm_grad(&current, &ids, &targets, per_token, &mut grads)? / targets.len() as f64;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            current.params.scaled_add(-config.learning_rate, &grads);
            total += loss;
        }
        losses.push(total / corpus.len().max(1) as f64);
    }
    Ok((current, losses))
}
