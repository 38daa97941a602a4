//! Learnable fusion module: a small transformer over hypothesis tokens with
//! cross-attention to encoder states, emitting per-token ILM/ELM weights for
//! rescoring.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use hatlm_autodiff::{Gradients, Optimizer, OptimizerKind, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{beam_search, rescore_components, BeamConfig, NBestList};
use crate::error::{Error, Result};
use crate::hat::{HatModel, HatRuntime, Utterance};
use crate::lm::LanguageModel;
use crate::mwer::{expected_errors_on, nwe, renormalize_on};
use crate::train::{batch_step, LogRecord, RunLog, Sampler, TrainConfig, TrainOutcome};
use crate::util::{init_uniform, mean_std, read_checkpoint, seq_sum, write_checkpoint};

pub const LFM_CHECKPOINT_KIND: &str = "lfm";

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfmConfig {
    pub vocab_size: usize,
    /// Width of the encoder states it attends to.
    pub enc_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Map the head through softplus so that every weight is >= 0.
    pub nonnegative: bool,
}

impl LfmConfig {
    pub fn new(vocab_size: usize, enc_dim: usize) -> Self {
        Self {
            vocab_size,
            enc_dim,
            dim: 16,
            heads: 2,
            layers: 2,
            ffn_dim: 32,
            nonnegative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.enc_dim == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::config("LFM sizes must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("LFM dim must be a multiple of the head count"));
        }
        Ok(())
    }
}

/// Per-token weights `mu_l` (ILM) and `nu_l` (ELM).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl FusionWeights {
    /// Scalar weights repeated over `len` tokens.
    pub fn broadcast(mu: f64, nu: f64, len: usize) -> Self {
        Self {
            mu: vec![mu; len],
            nu: vec![nu; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// `sum_l w_l * x_l`.
pub fn weighted_contribution(weights: &[f64], scores: &[f64]) -> Result<f64> {
    if weights.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: scores.len(),
        });
    }
    let terms: Vec<f64> = weights.iter().zip(scores).map(|(w, x)| w * x).collect();
    Ok(seq_sum(&terms))
}

struct LayerIds {
    self_q: ParamId,
    self_k: ParamId,
    self_v: ParamId,
    self_o: ParamId,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
    cross_o: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

struct LfmIds {
    embed: ParamId,
    mem_w: ParamId,
    mem_b: ParamId,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

impl LfmIds {
    fn resolve(config: &LfmConfig, ps: &ParamSet) -> Result<Self> {
        let layers = (0..config.layers)
            .map(|i| {
                let id = |n: &str| ps.id(&format!("layer{i}.{n}"));
                Ok(LayerIds {
                    self_q: id("self_q")?,
                    self_k: id("self_k")?,
                    self_v: id("self_v")?,
                    self_o: id("self_o")?,
                    cross_q: id("cross_q")?,
                    cross_k: id("cross_k")?,
                    cross_v: id("cross_v")?,
                    cross_o: id("cross_o")?,
                    ffn_w1: id("ffn_w1")?,
                    ffn_b1: id("ffn_b1")?,
                    ffn_w2: id("ffn_w2")?,
                    ffn_b2: id("ffn_b2")?,
                })
            })
            .collect::<std::result::Result<Vec<_>, TensorError>>()?;
        Ok(Self {
            embed: ps.id("embed")?,
            mem_w: ps.id("mem_w")?,
            mem_b: ps.id("mem_b")?,
            layers,
            head_w: ps.id("head_w")?,
            head_b: ps.id("head_b")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    kind: String,
    version: u32,
    model: LfmConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone)]
pub struct LfmModel {
    pub config: LfmConfig,
    pub params: ParamSet,
    ids: std::sync::Arc<LfmIds>,
}

impl std::fmt::Debug for LfmModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LfmModel").field("config", &self.config).finish_non_exhaustive()
    }
}

fn sinusoid(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape and data agree")
}

fn softplus_value(x: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.scalar(x);
    let y = tape.softplus(v);
    tape.value(y).item().expect("scalar")
}

/// A bias `b` with `softplus(b) == c` exactly when such a float exists
/// near the analytic preimage, otherwise the closest one found.
pub fn softplus_preimage(c: f64) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::config("softplus targets must be positive and finite"));
    }
    // ln(e^c - 1), written to stay accurate for small and large c
    let b0 = c + (-(-c).exp_m1()).ln();
    let mut best = b0;
    let mut best_err = (softplus_value(b0) - c).abs();
    for dir in [1.0f64, -1.0] {
        let mut b = b0;
        for _ in 0..64 {
            if best_err == 0.0 {
                return Ok(best);
            }
            b = next_toward(b, dir);
            let err = (softplus_value(b) - c).abs();
            if err < best_err {
                best = b;
                best_err = err;
            }
        }
    }
    Ok(best)
}

fn next_toward(x: f64, dir: f64) -> f64 {
    let bits = x.to_bits();
    let up = (x > 0.0) == (dir > 0.0);
    if x == 0.0 {
        let tiny = f64::from_bits(1);
        return if dir > 0.0 { tiny } else { -tiny };
    }
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}

impl LfmModel {
    pub fn new(config: LfmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (d, f) = (c.dim, c.ffn_dim);
        let mut ps = ParamSet::new();
        ps.insert("embed", init_uniform(&mut rng, &[c.vocab_size, d], 1))?;
        ps.insert("mem_w", init_uniform(&mut rng, &[c.enc_dim, d], c.enc_dim))?;
        ps.insert("mem_b", Tensor::zeros(&[d]))?;
        for i in 0..c.layers {
            for n in ["self_q", "self_k", "self_v", "self_o", "cross_q", "cross_k", "cross_v", "cross_o"] {
                ps.insert(&format!("layer{i}.{n}"), init_uniform(&mut rng, &[d, d], d))?;
            }
            ps.insert(&format!("layer{i}.ffn_w1"), init_uniform(&mut rng, &[d, f], d))?;
            ps.insert(&format!("layer{i}.ffn_b1"), Tensor::zeros(&[f]))?;
            ps.insert(&format!("layer{i}.ffn_w2"), init_uniform(&mut rng, &[f, d], f))?;
            ps.insert(&format!("layer{i}.ffn_b2"), Tensor::zeros(&[d]))?;
        }
        ps.insert("head_w", init_uniform(&mut rng, &[d, 2], d))?;
        ps.insert("head_b", Tensor::zeros(&[2]))?;
        Self::from_params(config, ps)
    }

    pub fn from_params(config: LfmConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let ids = LfmIds::resolve(&config, &params)?;
        let emb = params.get(ids.embed).shape();
        if emb != [config.vocab_size, config.dim] {
            return Err(Error::config(format!("embedding shape {emb:?} does not match the config")));
        }
        Ok(Self {
            config,
            params,
            ids: std::sync::Arc::new(ids),
        })
    }

    /// Zeroes the head weights and sets its biases so every token gets the
    /// same `(c_mu, c_nu)`. Returns the constants actually produced, which
    /// can differ from the request by a few units in the last place when no
    /// float bias maps exactly onto it.
    pub fn set_constant_head(&mut self, c_mu: f64, c_nu: f64) -> Result<(f64, f64)> {
        let nonneg = self.config.nonnegative;
        if nonneg && (c_mu < 0.0 || c_nu < 0.0) {
            return Err(Error::config("constant weights must be nonnegative"));
        }
        let bias = |c: f64| -> Result<f64> {
            if !nonneg {
                Ok(c)
            } else if c == 0.0 {
                Ok(f64::NEG_INFINITY)
            } else {
                softplus_preimage(c)
            }
        };
        let (bm, bn) = (bias(c_mu)?, bias(c_nu)?);
        let (w, b) = (self.ids.head_w, self.ids.head_b);
        self.params.get_mut(w).data_mut().fill(0.0);
        self.params.get_mut(b).data_mut().copy_from_slice(&[bm, bn]);
        let out = |x: f64| if nonneg { softplus_value(x) } else { x };
        Ok((out(bm), out(bn)))
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn heads_attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let dh = self.config.dim / self.config.heads;
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qs = tape.slice(q, 1, h * dh, (h + 1) * dh)?;
            let ks = tape.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vs = tape.slice(v, 1, h * dh, (h + 1) * dh)?;
            outs.push(tape.attention(qs, ks, vs, causal)?);
        }
        Ok(tape.concat(&outs, 1)?)
    }

    /// Weights `[L, 2]` (columns mu, nu) for a nonempty hypothesis.
    ///
    /// `enc` is the `[T, enc_dim]` encoder output of the frozen E2E model.
    pub fn forward_on(&self, tape: &mut Tape, enc: &Tensor, tokens: &[u32]) -> Result<Var> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::config("LFM forward needs at least one token"));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                size: c.vocab_size,
            });
        }
        if enc.rank() != 2 || enc.shape()[1] != c.enc_dim || enc.shape()[0] == 0 {
            return Err(Error::config(format!(
                "encoder states of shape {:?} do not match enc_dim {}",
                enc.shape(),
                c.enc_dim
            )));
        }
        let ids = &*self.ids;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let embed = self.p(tape, ids.embed);
        let x = tape.embedding(embed, &idx)?;
        let pos = tape.constant(sinusoid(tokens.len(), c.dim));
        let mut x = tape.add(x, pos)?;

        let enc = tape.constant(enc.clone());
        let mw = self.p(tape, ids.mem_w);
        let mb = self.p(tape, ids.mem_b);
        let mem = tape.matmul(enc, mw)?;
        let mem = tape.add(mem, mb)?;

        for l in &ids.layers {
            let h = tape.layer_norm(x, LN_EPS);
            let (wq, wk, wv, wo) = (
                self.p(tape, l.self_q),
                self.p(tape, l.self_k),
                self.p(tape, l.self_v),
                self.p(tape, l.self_o),
            );
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let a = self.heads_attention(tape, q, k, v, true)?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, LN_EPS);
            let (wq, wk, wv, wo) = (
                self.p(tape, l.cross_q),
                self.p(tape, l.cross_k),
                self.p(tape, l.cross_v),
                self.p(tape, l.cross_o),
            );
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(mem, wk)?;
            let v = tape.matmul(mem, wv)?;
            let a = self.heads_attention(tape, q, k, v, false)?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, LN_EPS);
            let (w1, b1, w2, b2) = (
                self.p(tape, l.ffn_w1),
                self.p(tape, l.ffn_b1),
                self.p(tape, l.ffn_w2),
                self.p(tape, l.ffn_b2),
            );
            let f = tape.matmul(h, w1)?;
            let f = tape.add(f, b1)?;
            let f = tape.tanh(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add(f, b2)?;
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(x, LN_EPS);
        let hw = self.p(tape, ids.head_w);
        let hb = self.p(tape, ids.head_b);
        let out = tape.matmul(h, hw)?;
        let out = tape.add(out, hb)?;
        Ok(if c.nonnegative { tape.softplus(out) } else { out })
    }

    pub fn forward(&self, enc: &Tensor, tokens: &[u32]) -> Result<FusionWeights> {
        if tokens.is_empty() {
            return Ok(FusionWeights::broadcast(0.0, 0.0, 0));
        }
        let mut tape = Tape::new();
        let w = self.forward_on(&mut tape, enc, tokens)?;
        let data = tape.value(w).data();
        Ok(FusionWeights {
            mu: data.iter().step_by(2).copied().collect(),
            nu: data.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format: "hatlm-checkpoint".into(),
            kind: LFM_CHECKPOINT_KIND.into(),
            version: 1,
            model: self.config.clone(),
            meta,
        };
        write_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params): (CheckpointHeader, _) = read_checkpoint(path)?;
        if header.kind != LFM_CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "{}: expected an LFM checkpoint, found `{}`",
                path.display(),
                header.kind
            )));
        }
        Self::from_params(header.model, params)
    }
}

/// Encoder states of the frozen E2E model as a `[T, enc_dim]` tensor.
pub fn encoder_states(hat: &HatModel, utterance: &Utterance) -> Result<Tensor> {
    let data = HatRuntime::new(hat).encode(&utterance.acoustics)?;
    let t = utterance.acoustics.len();
    Ok(Tensor::new(vec![t, hat.config.enc_dim], data)?)
}

pub fn lfm_forward(enc: &Tensor, tokens: &[u32], lfm: &LfmModel) -> Result<FusionWeights> {
    lfm.forward(enc, tokens)
}

fn rescore_by<F>(nbest: &NBestList, mut weights: F) -> Result<NBestList>
where
    F: FnMut(&[u32]) -> Result<FusionWeights>,
{
    let mut out = nbest.clone();
    for h in &mut out.hypotheses {
        let w = weights(&h.tokens)?;
        h.combined = h.e2e() - weighted_contribution(&w.mu, &h.ilm)? + weighted_contribution(&w.nu, &h.elm)?;
    }
    out.sort();
    Ok(out)
}

/// Re-ranks an LM-free N-best list with per-token LFM weights. Exact
/// full-sum scores are attached first where missing.
pub fn rescore_with_lfm(
    utterance: &Utterance,
    nbest: &NBestList,
    hat: &HatModel,
    lfm: &LfmModel,
) -> Result<NBestList> {
    if nbest.is_empty() {
        return Ok(nbest.clone());
    }
    let attached;
    let nbest = if nbest.hypotheses.iter().any(|h| h.e2e_full_sum.is_none()) {
        attached = rescore_components(nbest, hat, utterance)?;
        &attached
    } else {
        nbest
    };
    let enc = encoder_states(hat, utterance)?;
    rescore_by(nbest, |tokens| lfm.forward(&enc, tokens))
}

/// Scalar-weight rescoring through the same scoring path as the LFM.
pub fn rescore_scalar(nbest: &NBestList, mu: f64, nu: f64) -> Result<NBestList> {
    rescore_by(nbest, |tokens| Ok(FusionWeights::broadcast(mu, nu, tokens.len())))
}

/// Mean and population standard deviation of the emitted weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean_mu: f64,
    pub std_mu: f64,
    pub mean_nu: f64,
    pub std_nu: f64,
}

pub fn summarize_weights(weights: &[FusionWeights]) -> Result<WeightStats> {
    let mu: Vec<f64> = weights.iter().flat_map(|w| w.mu.iter().copied()).collect();
    let nu: Vec<f64> = weights.iter().flat_map(|w| w.nu.iter().copied()).collect();
    if mu.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mean_mu, std_mu) = mean_std(&mu);
    let (mean_nu, std_nu) = mean_std(&nu);
    Ok(WeightStats {
        mean_mu,
        std_mu,
        mean_nu,
        std_nu,
    })
}

/// Statistics over every token of every hypothesis in `lists`.
pub fn weight_stats(
    lfm: &LfmModel,
    hat: &HatModel,
    utterances: &[Utterance],
    lists: &[NBestList],
) -> Result<WeightStats> {
    if utterances.len() != lists.len() {
        return Err(Error::LengthMismatch {
            left: utterances.len(),
            right: lists.len(),
        });
    }
    let mut all = Vec::new();
    for (u, l) in utterances.iter().zip(lists) {
        let enc = encoder_states(hat, u)?;
        for h in &l.hypotheses {
            all.push(lfm.forward(&enc, &h.tokens)?);
        }
    }
    summarize_weights(&all)
}

/// Expected word errors with per-token LFM weights, for one utterance.
///
/// E2E, ILM and ELM scores are read from the list as constants; only the
/// LFM is on the tape.
pub fn lfm_loss_on(tape: &mut Tape, lfm: &LfmModel, enc: &Tensor, nbest: &NBestList) -> Result<Var> {
    if nbest.is_empty() {
        return Err(Error::EmptyNBest);
    }
    let mut scores = Vec::with_capacity(nbest.len());
    for h in &nbest.hypotheses {
        let e2e = tape.scalar(h.e2e());
        if h.tokens.is_empty() {
            scores.push(e2e);
            continue;
        }
        if h.ilm.len() != h.tokens.len() || h.elm.len() != h.tokens.len() {
            return Err(Error::LengthMismatch {
                left: h.tokens.len(),
                right: h.ilm.len().min(h.elm.len()),
            });
        }
        let w = lfm.forward_on(tape, enc, &h.tokens)?;
        let coef: Vec<f64> = h.ilm.iter().zip(&h.elm).flat_map(|(&s, &r)| [-s, r]).collect();
        let coef = tape.constant(Tensor::new(vec![h.tokens.len(), 2], coef)?);
        let prod = tape.mul(w, coef)?;
        let fused = tape.sum(prod);
        scores.push(tape.add(e2e, fused)?);
    }
    let log_post = renormalize_on(tape, &scores)?;
    let errors: Vec<f64> = nbest
        .hypotheses
        .iter()
        .map(|h| nwe(&h.tokens, &nbest.reference) as f64)
        .collect();
    expected_errors_on(tape, log_post, &errors)
}

/// One training example: utterance, its encoder states and LM-free N-best.
pub struct LfmExample<'a> {
    pub utterance: &'a Utterance,
    pub enc: &'a Tensor,
    pub nbest: &'a NBestList,
}

/// One Adam update of the LFM on `batch`; returns the mean loss.
///
/// The HAT must be frozen. With `theta > 0` the reference term is a constant
/// (its parameters are frozen) and only shifts the reported loss.
pub fn train_lfm_step(
    batch: &[LfmExample],
    hat: &HatModel,
    lfm: &mut LfmModel,
    optimizer: &mut Optimizer,
    theta: f64,
) -> Result<f64> {
    let r = lfm_step_grads(batch, hat, lfm, theta)?;
    if !r.0.is_finite() {
        return Err(Error::Numerical("non-finite LFM loss".into()));
    }
    apply(lfm, optimizer, &r.1)?;
    Ok(r.0)
}

fn ensure_frozen(hat: &HatModel) -> Result<()> {
    if let Some(id) = hat.params.ids().find(|&id| hat.params.is_trainable(id)) {
        return Err(Error::config(format!(
            "E2E parameter `{}` must be frozen for LFM training",
            hat.params.entry(id).name
        )));
    }
    Ok(())
}

fn lfm_step_grads(batch: &[LfmExample], hat: &HatModel, lfm: &LfmModel, theta: f64) -> Result<(f64, Gradients, usize)> {
    ensure_frozen(hat)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(theta >= 0.0) {
        return Err(Error::config("theta must be nonnegative"));
    }
    let hat_set = hat.params.uid();
    let r = batch_step(batch, |ex: &LfmExample| {
        if ex.nbest.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let loss = lfm_loss_on(&mut tape, lfm, ex.enc, ex.nbest)?;
        let mwer = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        if let Some(k) = grads.keys().find(|k| k.set == hat_set) {
            let name = hat.params.entry(k.id).name.clone();
            return Err(TensorError::FrozenGradient(name).into());
        }
        let anchor = if theta > 0.0 {
            theta * hat.full_sum_log_prob(ex.utterance, &ex.utterance.reference)?
        } else {
            0.0
        };
        Ok(Some((mwer - anchor, mwer, grads)))
    })?;
    Ok((r.loss, r.grads, r.skipped))
}

fn apply(lfm: &mut LfmModel, optimizer: &mut Optimizer, grads: &Gradients) -> Result<()> {
    lfm.params.accumulate(grads)?;
    optimizer.step(&mut lfm.params)?;
    Ok(())
}

/// N-best lists from LM-free search, decoded once per utterance.
///
/// The E2E model is frozen and search is deterministic, so a repeat decode
/// of the same utterance would return the same list.
struct NBestCache<'a> {
    hat: &'a HatModel,
    elm: &'a dyn LanguageModel,
    beam: BeamConfig,
    lists: Mutex<HashMap<String, std::sync::Arc<(Tensor, NBestList)>>>,
    decodes: AtomicU64,
}

impl<'a> NBestCache<'a> {
    fn get(&self, u: &Utterance) -> Result<std::sync::Arc<(Tensor, NBestList)>> {
        if let Some(hit) = self.lists.lock().expect("cache lock").get(&u.id) {
            return Ok(hit.clone());
        }
        let nb = beam_search(u, self.hat, Some(self.elm), &self.beam)?;
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let nb = if nb.is_empty() { nb } else { rescore_components(&nb, self.hat, u)? };
        let entry = std::sync::Arc::new((encoder_states(self.hat, u)?, nb));
        self.lists
            .lock()
            .expect("cache lock")
            .insert(u.id.clone(), entry.clone());
        Ok(entry)
    }

    fn stats(&self, lfm: &LfmModel, set: &[Utterance]) -> Result<WeightStats> {
        let mut all = Vec::new();
        for u in set {
            let e = self.get(u)?;
            for h in &e.1.hypotheses {
                all.push(lfm.forward(&e.0, &h.tokens)?);
            }
        }
        summarize_weights(&all)
    }
}

/// Utterances the train-set weight statistics are computed on.
pub const TRAIN_STATS_UTTERANCES: usize = 100;

/// Trains the LFM against a frozen E2E model and external LM.
///
/// Hypotheses come from LM-free search (`lambda = gamma = 0`). Weight
/// statistics for the first [`TRAIN_STATS_UTTERANCES`] training utterances
/// and every dev set in `dev` are logged every `log_every` steps and at the
/// end.
pub fn train_lfm(
    config: &TrainConfig,
    hat: &HatModel,
    elm: &dyn LanguageModel,
    init: LfmModel,
    train: &[Utterance],
    dev: &[(String, Vec<Utterance>)],
) -> Result<TrainOutcome<LfmModel>> {
    let cfg = TrainConfig {
        regime: crate::train::Regime::Lfm,
        ..config.clone()
    }
    .resolved()?;
    ensure_frozen(hat)?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if init.config.vocab_size != hat.vocab_size() || init.config.enc_dim != hat.config.enc_dim {
        return Err(Error::config("LFM sizes do not match the E2E model"));
    }
    let cache = NBestCache {
        hat,
        elm,
        beam: cfg.beam_config(),
        lists: Mutex::new(HashMap::new()),
        decodes: AtomicU64::new(0),
    };
    let stats_train = &train[..train.len().min(TRAIN_STATS_UTTERANCES)];
    let mut lfm = init;
    lfm.params.set_trainable(true);
    let mut log = RunLog::default();
    log.push(LogRecord::Header {
        regime: cfg.regime,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
    });
    let log_stats = |step: usize, lfm: &LfmModel, log: &mut RunLog| -> Result<()> {
        let sets = std::iter::once(("train", stats_train)).chain(dev.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
        for (name, set) in sets {
            if set.is_empty() {
                continue;
            }
            let s = cache.stats(lfm, set)?;
            log.push(LogRecord::WeightStats {
                step,
                set: name.to_string(),
                mean_mu: s.mean_mu,
                std_mu: s.std_mu,
                mean_nu: s.mean_nu,
                std_nu: s.std_nu,
            });
        }
        Ok(())
    };
    let every = cfg.log_every.max(1);
    let mut sampler = Sampler::new(train.len(), cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate);
    let mut last_good = None;
    for step in 0..cfg.steps {
        if step % every == 0 {
            log_stats(step, &lfm, &mut log)?;
        }
        let before = cache.decodes.load(Ordering::Relaxed);
        let entries: Vec<(&Utterance, std::sync::Arc<(Tensor, NBestList)>)> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| cache.get(&train[i]).map(|e| (&train[i], e)))
            .collect::<Result<_>>()?;
        let batch: Vec<LfmExample> = entries
            .iter()
            .map(|(u, e)| LfmExample {
                utterance: u,
                enc: &e.0,
                nbest: &e.1,
            })
            .collect();
        let (loss, grads, skipped) = lfm_step_grads(&batch, hat, &lfm, cfg.theta)?;
        let decodes = cache.decodes.load(Ordering::Relaxed) - before;
        let finite = grads.keys().all(|k| grads.get(k).is_some_and(|g| g.iter().all(|x| x.is_finite())));
        if !loss.is_finite() || !finite {
            if let Some(p) = last_good.take() {
                lfm.params = p;
            }
            log.push(LogRecord::Diverged { step });
            return Ok(TrainOutcome {
                model: lfm,
                log,
                diverged: Some(step),
            });
        }
        log.push(LogRecord::Step {
            step,
            loss,
            mwer: Some(loss),
            skipped,
            decodes,
        });
        if skipped == batch.len() {
            continue;
        }
        last_good = Some(lfm.params.clone());
        apply(&mut lfm, &mut opt, &grads)?;
    }
    log_stats(cfg.steps, &lfm, &mut log)?;
    Ok(TrainOutcome {
        model: lfm,
        log,
        diverged: None,
    })
}

/// Top-1 sequences after LFM rescoring of LM-free lists.
pub fn lfm_top1(
    hat: &HatModel,
    lfm: &LfmModel,
    utterances: &[Utterance],
    lists: &[NBestList],
) -> Result<Vec<Vec<u32>>> {
    use rayon::prelude::*;
    utterances
        .par_iter()
        .zip(lists)
        .map(|(u, l)| {
            let r = rescore_with_lfm(u, l, hat, lfm)?;
            Ok(r.best().map(|h| h.tokens.clone()).unwrap_or_default())
        })
        .collect()
}

/// Best-first ordering check shared by tests and tools.
pub fn same_ranking(a: &NBestList, b: &NBestList) -> bool {
    a.len() == b.len() && a.hypotheses.iter().zip(&b.hypotheses).all(|(x, y)| x.tokens == y.tokens)
}
