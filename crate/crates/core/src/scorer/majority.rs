use std::collections::{BTreeMap, HashMap};

use super::{ScoreRequest, ScoreResponse, Scorer, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::resource::KBTuple;

/// Scores each candidate by how often it is the gold object of the
/// request's relation, so the argmax is always the relation's modal object
/// (earliest candidate on ties) regardless of the pattern.
#[derive(Debug, Clone, Default)]
pub struct MajorityScorer {
    per_relation: HashMap<String, BTreeMap<String, usize>>,
    global: BTreeMap<String, usize>,
}

impl MajorityScorer {
    pub fn from_tuples(tuples: &[KBTuple]) -> Self {
        let mut s = MajorityScorer::default();
        for t in tuples {
            *s.per_relation
                .entry(t.relation_id.clone())
                .or_default()
                .entry(t.object.clone())
                .or_default() += 1;
            *s.global.entry(t.object.clone()).or_default() += 1;
        }
        s
    }
}

impl Scorer for MajorityScorer {
    fn model_id(&self) -> &str {
        "majority"
    }

    fn mask_token(&self) -> &str {
        MASK_TOKEN
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        if request.candidates.is_empty() {
            return Err(Error::invalid("empty candidate list"));
        }
        let n_masks = request.text.matches(MASK_TOKEN).count();
        if n_masks != 1 {
            return Err(Error::MaskCount(n_masks));
        }
        let counts = request
            .relation_id
            .as_ref()
            .and_then(|r| self.per_relation.get(r))
            .unwrap_or(&self.global);
        Ok(ScoreResponse {
            log_scores: request
                .candidates
                .iter()
                .map(|c| counts.get(c).copied().unwrap_or(0) as f64)
                .collect(),
            hidden: None,
            model_id: "majority".into(),
        })
    }

    fn tokenize_check(&self, words: &[String]) -> Result<Vec<bool>> {
        Ok(words.iter().map(|w| !w.is_empty()).collect())
    }
}
