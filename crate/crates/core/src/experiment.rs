//! The toy-scale training-effect experiment.
//!
//! A toy MLM is pretrained on a synthetic KB where every fact appears in its
//! base pattern and paraphrases are seen with a configurable probability
//! (never, by default), which leaves the model inconsistent across patterns. Continued training on a
//! few relations then compares the consistency-regularized objective with
//! an MLM-only control (same seed, same steps) and with the "-MLM"
//! ablation, all evaluated on the held-out relations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::resource::{generate_synth_kb, SynthKb};
use crate::resource::{build_candidates, KBTuple, Relation};
use crate::scorer::{ToyDims, ToyMLM, ToyParams};
use crate::trainer::{evaluate, pretrain, train, MlmExample, PretrainConfig, SuiteScores, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_relations: usize,
    pub n_entities: usize,
    pub n_patterns: usize,
    /// The first `n_train_relations` relations are trained on; the rest are
    /// held out.
    pub n_train_relations: usize,
    /// Probability that a non-base pattern of a fact enters the pretraining
    /// corpus.
    pub paraphrase_exposure: f64,
    pub d_model: usize,
    pub d_ff: usize,
    pub pretrain: PretrainConfig,
    /// Shared by every run; `lambda` is the value of the regularized runs.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            n_relations: 5,
            n_entities: 50,
            n_patterns: 4,
            n_train_relations: 2,
            paraphrase_exposure: 0.0,
            d_model: 32,
            d_ff: 64,
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                epochs: 20,
                learning_rate: 0.2,
                max_grad_norm: Some(1.0),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub pretrained: SuiteScores,
    /// lambda = 0: MLM on the training relations only.
    pub control: SuiteScores,
    pub full: SuiteScores,
    pub no_mlm: SuiteScores,
    pub pretrain_losses: Vec<f64>,
}

/// Relations of `kb` with candidate sets filled in.
pub fn with_candidates(kb: &SynthKb) -> Result<Vec<Relation>> {
    kb.relations.iter().map(|r| build_candidates(r, &kb.tuples)).collect()
}

/// Pretraining corpus: every fact in its base pattern, each paraphrase with
/// probability `exposure`.
pub fn pretraining_corpus(relations: &[Relation], tuples: &[KBTuple], exposure: f64, seed: u64) -> Vec<MlmExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::new();
    for t in tuples {
        let Some(rel) = relations.iter().find(|r| r.id == t.relation_id) else { continue };
        for p in &rel.patterns {
            let draw: f64 = rng.random();
            if p.is_base || draw < exposure {
                corpus.push(MlmExample {
                    pattern: p.clone(),
                    subject: t.subject.clone(),
                    object: t.object.clone(),
                });
            }
        }
    }
    corpus
}

pub fn pretrained_model(kb: &SynthKb, config: &ExperimentConfig) -> Result<(ToyMLM, Vec<f64>)> {
    let dims = ToyDims::new(kb.vocabulary.len(), config.d_model, config.d_ff, 16);
    let init = ToyMLM::new(kb.vocabulary.clone(), ToyParams::random(dims, config.seed))?;
    let corpus = pretraining_corpus(&kb.relations, &kb.tuples, config.paraphrase_exposure, config.seed);
    let (model, losses) = pretrain(&init, &corpus, &config.pretrain)?;
    Ok((model.with_model_id("toy:synthetic-pretrained"), losses))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let kb = generate_synth_kb(config.seed, config.n_relations, config.n_entities, config.n_patterns);
    let relations = with_candidates(&kb)?;
    let (model, pretrain_losses) = pretrained_model(&kb, config)?;
    let (train_rels, held_out) = relations.split_at(config.n_train_relations.min(relations.len()));

    let run = |cfg: TrainConfig| -> Result<SuiteScores> {
        let outcome = train(&model, train_rels, &[], &kb.tuples, &cfg)?;
        evaluate(&outcome.model, held_out, &kb.tuples)
    };
    Ok(ExperimentOutcome {
        pretrained: evaluate(&model, held_out, &kb.tuples)?,
        control: run(TrainConfig {
            lambda: 0.0,
            ..config.train.clone()
        })?,
        full: run(config.train.clone())?,
        no_mlm: run(config.train.clone().without_mlm())?,
        pretrain_losses,
    })
}
