//! External language models with incremental per-token scoring.

mod neural;
mod ngram;

use std::path::Path;
use std::sync::Arc;

pub use neural::{NeuralLm, NeuralLmConfig};
pub use ngram::{NGramLm, Smoothing};

use crate::error::{Error, Result};
use crate::util::seq_sum;

/// Incremental scoring state. Treat as opaque.
#[derive(Clone, Debug, PartialEq)]
pub enum LmState {
    /// Last `n - 1` outcomes, oldest first, padded with the start marker.
    Context(Vec<u32>),
    Hidden(Arc<Vec<f64>>),
}

/// Per-token log-probabilities `r_1..r_L` of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LmScore {
    pub per_token: Vec<f64>,
    pub eos: Option<f64>,
    pub total: f64,
}

pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn start(&self) -> LmState;

    /// Log-probabilities of every vocabulary token after `state`.
    fn next_log_probs(&self, state: &LmState) -> Vec<f64>;

    /// `(state after token, log P(token | state))`.
    fn advance(&self, state: &LmState, token: u32) -> (LmState, f64);

    /// End-of-sentence log-probability, if the model has that outcome.
    fn eos_log_prob(&self, state: &LmState) -> Option<f64>;

    fn score_tokens(&self, tokens: &[u32], with_eos: bool) -> LmScore {
        let mut state = self.start();
        let mut per_token = Vec::with_capacity(tokens.len());
        for &y in tokens {
            let (next, lp) = self.advance(&state, y);
            per_token.push(lp);
            state = next;
        }
        let eos = if with_eos {
            self.eos_log_prob(&state)
        } else {
            None
        };
        let total = seq_sum(&per_token) + eos.unwrap_or(0.0);
        LmScore {
            per_token,
            eos,
            total,
        }
    }
}

/// Either kind of external LM, loadable from disk.
#[derive(Clone, Debug)]
pub enum ExternalLm {
    NGram(NGramLm),
    Neural(NeuralLm),
}

impl ExternalLm {
    pub fn load(path: &Path) -> Result<Self> {
        let head = std::fs::read(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let first = head.split(|&b| b == b'\n').next().unwrap_or_default();
        let v: serde_json::Value = serde_json::from_slice(first)?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some(ngram::KIND) => Ok(Self::NGram(NGramLm::load(path)?)),
            Some(neural::KIND) => Ok(Self::Neural(NeuralLm::load(path)?)),
            other => Err(Error::Format(format!(
                "{}: unknown LM kind {other:?}",
                path.display()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Self::NGram(m) => m.save(path),
            Self::Neural(m) => m.save(path),
        }
    }

    fn inner(&self) -> &dyn LanguageModel {
        match self {
            Self::NGram(m) => m,
            Self::Neural(m) => m,
        }
    }
}

impl LanguageModel for ExternalLm {
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn start(&self) -> LmState {
        self.inner().start()
    }
    fn next_log_probs(&self, state: &LmState) -> Vec<f64> {
        self.inner().next_log_probs(state)
    }
    fn advance(&self, state: &LmState, token: u32) -> (LmState, f64) {
        self.inner().advance(state, token)
    }
    fn eos_log_prob(&self, state: &LmState) -> Option<f64> {
        self.inner().eos_log_prob(state)
    }
}
