//! Uniform scoring interface over masked language models.
//!
//! A scorer receives a populated cloze and an ordered candidate list and
//! returns one raw log-score per candidate. Normalisation is left to the
//! consumer; the prediction is the argmax, ties broken by candidate order.

mod bridge;
mod majority;
mod toy;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use bridge::{BridgeEndpoint, BridgeHello, BridgeScorer};
pub use majority::MajorityScorer;
pub use toy::{ForwardCache, ToyDims, ToyMLM, ToyParams};

pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub text: String,
    pub candidates: Vec<String>,
    pub want_hidden: bool,
    /// Relation context for scorers that need it (the majority baseline).
    /// Never sent over the bridge wire.
    #[serde(skip)]
    pub relation_id: Option<String>,
}

impl ScoreRequest {
    pub fn new(text: impl Into<String>, candidates: Vec<String>) -> Self {
        ScoreRequest {
            text: text.into(),
            candidates,
            want_hidden: false,
            relation_id: None,
        }
    }

    pub fn with_hidden(mut self) -> Self {
        self.want_hidden = true;
        self
    }

    pub fn for_relation(mut self, relation_id: impl Into<String>) -> Self {
        self.relation_id = Some(relation_id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub log_scores: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
    pub model_id: String,
}

impl ScoreResponse {
    /// Index of the top-scoring candidate; the earliest wins a tie.
    pub fn argmax(&self) -> usize {
        argmax(&self.log_scores)
    }
}

pub trait Scorer {
    fn model_id(&self) -> &str;

    fn mask_token(&self) -> &str;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse>;

    /// For each word, whether it is exactly one vocabulary token.
    fn tokenize_check(&self, words: &[String]) -> Result<Vec<bool>>;

    fn supports_hidden(&self) -> bool {
        false
    }
}

/// First index of the maximum. Returns 0 on an empty slice.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Whitespace tokenizer: strips leading and trailing ASCII punctuation from
/// each word and keeps case. The mask token is kept intact even when glued
/// to punctuation (`"[MASK]."`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        push_word(word, &mut out);
    }
    out
}

fn push_word(word: &str, out: &mut Vec<String>) {
    if let Some(at) = word.find(MASK_TOKEN) {
        push_word(&word[..at], out);
        out.push(MASK_TOKEN.to_owned());
        push_word(&word[at + MASK_TOKEN.len()..], out);
        return;
    }
    let trimmed = word.trim_matches(|c: char| c.is_ascii_punctuation());
    if !trimmed.is_empty() {
        out.push(trimmed.to_owned());
    }
}
