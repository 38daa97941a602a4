use std::path::Path;
use std::sync::Arc;

use hatlm_autodiff::{log_sum_exp, matmul_into, Optimizer, OptimizerKind, ParamId, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmState};
use crate::error::{Error, Result};
use crate::util::{init_uniform, read_checkpoint, write_checkpoint};

pub(super) const KIND: &str = "neural";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl NeuralLmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 32,
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Elman recurrent LM with an end-of-sentence outcome at index `|V|`.
#[derive(Clone, Debug)]
pub struct NeuralLm {
    config: NeuralLmConfig,
    params: ParamSet,
    ids: Ids,
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    embed: ParamId,
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    version: u32,
    model: NeuralLmConfig,
}

impl NeuralLm {
    pub fn new(config: NeuralLmConfig) -> Result<Self> {
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        if v == 0 || e == 0 || h == 0 {
            return Err(Error::config("neural LM dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        ps.insert("lm.embed", init_uniform(&mut rng, &[v + 1, e], 1))?;
        ps.insert("lm.wx", init_uniform(&mut rng, &[e, h], e))?;
        ps.insert("lm.wh", init_uniform(&mut rng, &[h, h], h))?;
        ps.insert("lm.b", Tensor::zeros(&[h]))?;
        ps.insert("lm.out_w", init_uniform(&mut rng, &[h, v + 1], h))?;
        ps.insert("lm.out_b", Tensor::zeros(&[v + 1]))?;
        Self::from_params(config, ps)
    }

    fn from_params(config: NeuralLmConfig, params: ParamSet) -> Result<Self> {
        let ids = Ids {
            embed: params.id("lm.embed")?,
            wx: params.id("lm.wx")?,
            wh: params.id("lm.wh")?,
            b: params.id("lm.b")?,
            out_w: params.id("lm.out_w")?,
            out_b: params.id("lm.out_b")?,
        };
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Trains on `corpus` with Adam; minibatches are drawn with the config seed.
    pub fn train(corpus: &[Vec<u32>], config: NeuralLmConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("neural LM training corpus is empty"));
        }
        let mut lm = Self::new(config.clone())?;
        for s in corpus {
            if let Some(&token) = s.iter().find(|&&w| w as usize >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token,
                    size: config.vocab_size,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut opt = Optimizer::new(OptimizerKind::adam(), config.learning_rate);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut cursor = order.len();
        for step in 0..config.steps {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size.max(1) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&corpus[order[cursor]]);
                cursor += 1;
            }
            let mut tape = Tape::new();
            let loss = lm.loss_on(&mut tape, &batch)?;
            if !tape.value(loss).item()?.is_finite() {
                return Err(Error::Diverged { step });
            }
            tape.backward_into(loss, &mut lm.params)?;
            opt.step(&mut lm.params)?;
        }
        Ok(lm)
    }

    /// Mean per-outcome negative log-likelihood, end-of-sentence included.
    fn loss_on(&self, tape: &mut Tape, batch: &[&Vec<u32>]) -> Result<Var> {
        let v = self.config.vocab_size;
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let (embed, wx, wh, b) = (
            p(tape, self.ids.embed),
            p(tape, self.ids.wx),
            p(tape, self.ids.wh),
            p(tape, self.ids.b),
        );
        let (out_w, out_b) = (p(tape, self.ids.out_w), p(tape, self.ids.out_b));
        let mut picks = Vec::new();
        let mut count = 0usize;
        for s in batch {
            let inputs: Vec<usize> = std::iter::once(v)
                .chain(s.iter().map(|&w| w as usize))
                .collect();
            let x = tape.embedding(embed, &inputs)?;
            let xw = tape.matmul(x, wx)?;
            let xw = tape.add(xw, b)?;
            let mut rows = Vec::with_capacity(inputs.len());
            let mut prev: Option<Var> = None;
            for i in 0..inputs.len() {
                let mut pre = tape.slice(xw, 0, i, i + 1)?;
                if let Some(h) = prev {
                    let r = tape.matmul(h, wh)?;
                    pre = tape.add(pre, r)?;
                }
                let h = tape.tanh(pre);
                rows.push(h);
                prev = Some(h);
            }
            let hs = tape.concat(&rows, 0)?;
            let logits = tape.matmul(hs, out_w)?;
            let logits = tape.add(logits, out_b)?;
            let lp = tape.log_softmax(logits);
            let n = inputs.len();
            let flat = tape.reshape(lp, &[n * (v + 1), 1])?;
            let idx: Vec<usize> = s
                .iter()
                .map(|&w| w as usize)
                .chain(std::iter::once(v))
                .enumerate()
                .map(|(i, y)| i * (v + 1) + y)
                .collect();
            count += idx.len();
            picks.push(tape.embedding(flat, &idx)?);
        }
        let all = tape.concat(&picks, 0)?;
        let total = tape.sum(all);
        Ok(tape.scale(total, -1.0 / count as f64))
    }

    fn step_hidden(&self, input: usize, prev: Option<&[f64]>) -> Vec<f64> {
        let (e, h) = (self.config.embed_dim, self.config.hidden_dim);
        let emb = &self.params.get(self.ids.embed).data()[input * e..(input + 1) * e];
        let mut pre = vec![0.0; h];
        matmul_into(emb, self.params.get(self.ids.wx).data(), &mut pre, 1, e, h);
        for (x, b) in pre.iter_mut().zip(self.params.get(self.ids.b).data()) {
            *x += b;
        }
        if let Some(prev) = prev {
            let mut r = vec![0.0; h];
            matmul_into(prev, self.params.get(self.ids.wh).data(), &mut r, 1, h, h);
            pre.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
        pre.iter_mut().for_each(|x| *x = x.tanh());
        pre
    }

    /// Full log-distribution over `V ∪ {eos}`.
    fn distribution(&self, hidden: &[f64]) -> Vec<f64> {
        let (h, o) = (self.config.hidden_dim, self.config.vocab_size + 1);
        let mut logits = vec![0.0; o];
        matmul_into(hidden, self.params.get(self.ids.out_w).data(), &mut logits, 1, h, o);
        for (x, b) in logits.iter_mut().zip(self.params.get(self.ids.out_b).data()) {
            *x += b;
        }
        let lse = log_sum_exp(&logits);
        logits.iter_mut().for_each(|x| *x -= lse);
        logits
    }

    /// Log-probabilities over the vocabulary followed by end-of-sentence.
    pub fn outcome_log_probs(&self, state: &LmState) -> Vec<f64> {
        self.distribution(self.hidden(state))
    }

    fn hidden<'a>(&self, state: &'a LmState) -> &'a [f64] {
        match state {
            LmState::Hidden(h) => h,
            LmState::Context(_) => panic!("recurrent model given an n-gram state"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: "hatlm-lm".into(),
            kind: KIND.into(),
            version: 1,
            model: self.config.clone(),
        };
        write_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (Header, _) = read_checkpoint(path)?;
        if h.kind != KIND {
            return Err(Error::Format(format!("{}: not a neural LM", path.display())));
        }
        Self::from_params(h.model, params)
    }
}

impl LanguageModel for NeuralLm {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn start(&self) -> LmState {
        LmState::Hidden(Arc::new(self.step_hidden(self.config.vocab_size, None)))
    }

    fn next_log_probs(&self, state: &LmState) -> Vec<f64> {
        let mut d = self.distribution(self.hidden(state));
        d.truncate(self.config.vocab_size);
        d
    }

    fn advance(&self, state: &LmState, token: u32) -> (LmState, f64) {
        let h = self.hidden(state);
        if token as usize >= self.config.vocab_size {
            return (state.clone(), f64::NEG_INFINITY);
        }
        let lp = self.distribution(h)[token as usize];
        let next = self.step_hidden(token as usize, Some(h));
        (LmState::Hidden(Arc::new(next)), lp)
    }

    fn eos_log_prob(&self, state: &LmState) -> Option<f64> {
        Some(self.distribution(self.hidden(state))[self.config.vocab_size])
    }
}
