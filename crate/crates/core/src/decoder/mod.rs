//! Frame-synchronous beam search with shallow LM fusion, an exhaustive
//! reference decoder, and N-best containers.

mod beam;
mod exhaustive;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use beam::{beam_search, beam_search_batch, beam_search_fusion_free};
pub use exhaustive::{exhaustive_search, ENUMERATION_LIMIT};

use crate::error::{Error, Result};
use crate::hat::{HatModel, Utterance};
use crate::util::{read_jsonl, seq_sum, write_jsonl};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// ILM weight, subtracted.
    pub lambda: f64,
    /// ELM weight, added.
    pub gamma: f64,
    pub max_len: usize,
    /// Labels emitted within a single frame before a blank is forced.
    pub emit_cap: usize,
    /// Add the ELM end-of-sentence term to finished hypotheses.
    pub elm_eos: bool,
    /// Drop expansions scoring this far below the best hypothesis finished
    /// in the current frame. `None` keeps everything the beam admits.
    #[serde(default)]
    pub prune_margin: Option<f64>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 8,
            lambda: 0.0,
            gamma: 0.0,
            max_len: 32,
            emit_cap: 4,
            elm_eos: false,
            prune_margin: Some(10.0),
        }
    }
}

impl BeamConfig {
    pub fn with_weights(lambda: f64, gamma: f64) -> Self {
        Self {
            lambda,
            gamma,
            ..Self::default()
        }
    }

    /// No pruning beyond the beam width itself.
    pub fn exhaustive(mut self) -> Self {
        self.prune_margin = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::config("fusion weights must be nonnegative"));
        }
        if self.prune_margin.is_some_and(|m| !(m >= 0.0)) {
            return Err(Error::config("prune margin must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// E2E log-score merged over the alignment paths the search visited.
    pub e2e_search: f64,
    /// Exact full-sum E2E log-probability, once attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e2e_full_sum: Option<f64>,
    /// Per-token ILM scores `s_l`.
    pub ilm: Vec<f64>,
    /// Per-token ELM scores `r_l`.
    pub elm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elm_eos: Option<f64>,
    pub combined: f64,
    #[serde(default)]
    pub truncated: bool,
}

/// `e2e - lambda * sum(s) + gamma * (sum(r) + eos)`.
pub fn combine(e2e: f64, ilm: &[f64], elm: &[f64], eos: Option<f64>, lambda: f64, gamma: f64) -> f64 {
    let r = match eos {
        Some(e) => seq_sum(elm) + e,
        None => seq_sum(elm),
    };
    e2e - lambda * seq_sum(ilm) + gamma * r
}

impl Hypothesis {
    pub fn ilm_total(&self) -> f64 {
        seq_sum(&self.ilm)
    }

    pub fn elm_total(&self) -> f64 {
        seq_sum(&self.elm)
    }

    /// Combined score from the stored search-side components.
    pub fn recombine(&self, lambda: f64, gamma: f64) -> f64 {
        combine(self.e2e_search, &self.ilm, &self.elm, self.elm_eos, lambda, gamma)
    }

    /// E2E score for losses and rescoring: exact when attached.
    pub fn e2e(&self) -> f64 {
        self.e2e_full_sum.unwrap_or(self.e2e_search)
    }
}

/// Descending score, then lexicographic token order.
pub fn rank_order(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utterance_id: String,
    pub reference: Vec<u32>,
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    /// Sorts by stored combined score with the shared tie-break.
    pub fn sort(&mut self) {
        self.hypotheses
            .sort_by(|a, b| rank_order(a.combined, &a.tokens, b.combined, &b.tokens));
    }

    pub fn write(path: &Path, lists: &[NBestList]) -> Result<()> {
        write_jsonl(path, lists)
    }

    pub fn read(path: &Path) -> Result<Vec<NBestList>> {
        read_jsonl(path)
    }
}

/// Attaches exact full-sum E2E scores; search estimates are kept.
pub fn rescore_components(nbest: &NBestList, hat: &HatModel, utterance: &Utterance) -> Result<NBestList> {
    if nbest.is_empty() {
        return Err(Error::EmptyNBest);
    }
    let mut out = nbest.clone();
    for h in &mut out.hypotheses {
        h.e2e_full_sum = Some(hat.full_sum_log_prob(utterance, &h.tokens)?);
    }
    Ok(out)
}
