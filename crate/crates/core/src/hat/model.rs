use std::path::Path;

use hatlm_autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lattice::{LatticeLocals, SequenceScore};
use super::Utterance;
use crate::error::{Error, Result};
use crate::util::{init_uniform, read_checkpoint, seq_sum, write_checkpoint};

pub const HAT_CHECKPOINT_KIND: &str = "hat";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatConfig {
    /// Size of the acoustic symbol alphabet.
    pub acoustic_vocab: usize,
    /// Number of output labels |V| (blank excluded).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// Frames of left/right context concatenated before the encoder projection.
    pub context: usize,
    pub recurrent_encoder: bool,
}

impl HatConfig {
    pub fn new(acoustic_vocab: usize, vocab_size: usize) -> Self {
        Self {
            acoustic_vocab,
            vocab_size,
            embed_dim: 16,
            enc_dim: 32,
            pred_dim: 32,
            joint_dim: 32,
            context: 1,
            recurrent_encoder: true,
        }
    }

    /// Tiny dimensions for enumeration and finite-difference tests.
    pub fn tiny(acoustic_vocab: usize, vocab_size: usize) -> Self {
        Self {
            acoustic_vocab,
            vocab_size,
            embed_dim: 3,
            enc_dim: 4,
            pred_dim: 4,
            joint_dim: 4,
            context: 1,
            recurrent_encoder: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.acoustic_vocab,
            self.vocab_size,
            self.embed_dim,
            self.enc_dim,
            self.pred_dim,
            self.joint_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config("HAT dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HatIds {
    pub acoustic_embed: ParamId,
    pub window_w: ParamId,
    pub window_b: ParamId,
    pub rnn: Option<(ParamId, ParamId, ParamId)>,
    pub label_embed: ParamId,
    pub pred_wx: ParamId,
    pub pred_wh: ParamId,
    pub pred_b: ParamId,
    pub joint_enc: ParamId,
    pub joint_enc_b: ParamId,
    pub joint_pred: ParamId,
    pub blank_w: ParamId,
    pub blank_b: ParamId,
    pub label_w: ParamId,
    pub label_b: ParamId,
}

impl HatIds {
    fn resolve(config: &HatConfig, ps: &ParamSet) -> Result<Self> {
        let rnn = if config.recurrent_encoder {
            Some((ps.id("enc.rnn_wx")?, ps.id("enc.rnn_wh")?, ps.id("enc.rnn_b")?))
        } else {
            None
        };
        Ok(Self {
            acoustic_embed: ps.id("enc.embed")?,
            window_w: ps.id("enc.window_w")?,
            window_b: ps.id("enc.window_b")?,
            rnn,
            label_embed: ps.id("pred.embed")?,
            pred_wx: ps.id("pred.wx")?,
            pred_wh: ps.id("pred.wh")?,
            pred_b: ps.id("pred.b")?,
            joint_enc: ps.id("joint.enc")?,
            joint_enc_b: ps.id("joint.enc_b")?,
            joint_pred: ps.id("joint.pred")?,
            blank_w: ps.id("joint.blank_w")?,
            blank_b: ps.id("joint.blank_b")?,
            label_w: ps.id("joint.label_w")?,
            label_b: ps.id("joint.label_b")?,
        })
    }
}

/// HAT parameters together with their shape configuration.
#[derive(Clone, Debug)]
pub struct HatModel {
    pub config: HatConfig,
    pub params: ParamSet,
    pub(crate) ids: HatIds,
}

/// Parameter leaves of one model bound onto one tape.
#[derive(Clone, Copy, Debug)]
pub struct HatVars {
    acoustic_embed: Var,
    window_w: Var,
    window_b: Var,
    rnn: Option<(Var, Var, Var)>,
    label_embed: Var,
    pred_wx: Var,
    pred_wh: Var,
    pred_b: Var,
    joint_enc: Var,
    joint_enc_b: Var,
    joint_pred: Var,
    pub(crate) blank_w: Var,
    pub(crate) blank_b: Var,
    pub(crate) label_w: Var,
    pub(crate) label_b: Var,
}

/// Per-token internal-LM log-probabilities of one label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct IlmScore {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl IlmScore {
    pub fn new(per_token: Vec<f64>) -> Self {
        let total = seq_sum(&per_token);
        Self { per_token, total }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    kind: String,
    version: u32,
    model: HatConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

impl HatModel {
    pub fn new(config: HatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (e, h, p, j, v) = (c.embed_dim, c.enc_dim, c.pred_dim, c.joint_dim, c.vocab_size);
        let win = (2 * c.context + 1) * e;
        let mut ps = ParamSet::new();
        ps.insert("enc.embed", init_uniform(&mut rng, &[c.acoustic_vocab, e], 1))?;
        ps.insert("enc.window_w", init_uniform(&mut rng, &[win, h], win))?;
        ps.insert("enc.window_b", Tensor::zeros(&[h]))?;
        if c.recurrent_encoder {
            ps.insert("enc.rnn_wx", init_uniform(&mut rng, &[h, h], h))?;
            ps.insert("enc.rnn_wh", init_uniform(&mut rng, &[h, h], h))?;
            ps.insert("enc.rnn_b", Tensor::zeros(&[h]))?;
        }
        // row `v` is the start-of-sequence input
        ps.insert("pred.embed", init_uniform(&mut rng, &[v + 1, e], 1))?;
        ps.insert("pred.wx", init_uniform(&mut rng, &[e, p], e))?;
        ps.insert("pred.wh", init_uniform(&mut rng, &[p, p], p))?;
        ps.insert("pred.b", Tensor::zeros(&[p]))?;
        ps.insert("joint.enc", init_uniform(&mut rng, &[h, j], h))?;
        ps.insert("joint.enc_b", Tensor::zeros(&[j]))?;
        ps.insert("joint.pred", init_uniform(&mut rng, &[p, j], p))?;
        ps.insert("joint.blank_w", init_uniform(&mut rng, &[j, 1], j))?;
        ps.insert("joint.blank_b", Tensor::zeros(&[1]))?;
        ps.insert("joint.label_w", init_uniform(&mut rng, &[j, v], j))?;
        ps.insert("joint.label_b", Tensor::zeros(&[v]))?;
        Self::from_params(config, ps)
    }

    pub fn from_params(config: HatConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let ids = HatIds::resolve(&config, &params)?;
        let label_shape = params.get(ids.label_w).shape();
        if label_shape != [config.joint_dim, config.vocab_size] {
            return Err(Error::config(format!(
                "label head shape {label_shape:?} does not match |V|={}",
                config.vocab_size
            )));
        }
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Zeroes the label head so every label distribution is uniform.
    pub fn zero_label_head(&mut self) {
        let (w, b) = (self.ids.label_w, self.ids.label_b);
        self.params.get_mut(w).data_mut().fill(0.0);
        self.params.get_mut(b).data_mut().fill(0.0);
    }

    /// Sets the blank head to a constant logit independent of the joint state.
    pub fn set_constant_blank_logit(&mut self, logit: f64) {
        let (w, b) = (self.ids.blank_w, self.ids.blank_b);
        self.params.get_mut(w).data_mut().fill(0.0);
        self.params.get_mut(b).data_mut()[0] = logit;
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format: "hatlm-checkpoint".into(),
            kind: HAT_CHECKPOINT_KIND.into(),
            version: 1,
            model: self.config.clone(),
            meta,
        };
        write_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params): (CheckpointHeader, _) = read_checkpoint(path)?;
        if header.kind != HAT_CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "{}: expected a HAT checkpoint, found `{}`",
                path.display(),
                header.kind
            )));
        }
        Self::from_params(header.model, params)
    }

    pub fn bind(&self, tape: &mut Tape) -> HatVars {
        let ps = &self.params;
        let ids = &self.ids;
        HatVars {
            acoustic_embed: tape.param(ps, ids.acoustic_embed),
            window_w: tape.param(ps, ids.window_w),
            window_b: tape.param(ps, ids.window_b),
            rnn: ids
                .rnn
                .map(|(a, b, c)| (tape.param(ps, a), tape.param(ps, b), tape.param(ps, c))),
            label_embed: tape.param(ps, ids.label_embed),
            pred_wx: tape.param(ps, ids.pred_wx),
            pred_wh: tape.param(ps, ids.pred_wh),
            pred_b: tape.param(ps, ids.pred_b),
            joint_enc: tape.param(ps, ids.joint_enc),
            joint_enc_b: tape.param(ps, ids.joint_enc_b),
            joint_pred: tape.param(ps, ids.joint_pred),
            blank_w: tape.param(ps, ids.blank_w),
            blank_b: tape.param(ps, ids.blank_b),
            label_w: tape.param(ps, ids.label_w),
            label_b: tape.param(ps, ids.label_b),
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let size = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= size) {
            Some(&token) => Err(Error::TokenOutOfRange { token, size }),
            None => Ok(()),
        }
    }

    /// Encoder states `[T, enc_dim]` on the tape.
    pub fn encode_on(&self, tape: &mut Tape, vars: &HatVars, acoustics: &[u32]) -> Result<Var> {
        let t_len = acoustics.len();
        if t_len == 0 {
            return Err(Error::EmptyAcoustics);
        }
        let size = self.config.acoustic_vocab;
        if let Some(&symbol) = acoustics.iter().find(|&&s| s as usize >= size) {
            return Err(Error::SymbolOutOfRange { symbol, size });
        }
        let idx: Vec<usize> = acoustics.iter().map(|&s| s as usize).collect();
        let x = tape.embedding(vars.acoustic_embed, &idx)?;
        let pad = tape.constant(Tensor::zeros(&[1, self.config.embed_dim]));
        let padded = tape.concat(&[x, pad], 0)?;
        let c = self.config.context as isize;
        let mut windows = Vec::with_capacity(2 * self.config.context + 1);
        for off in -c..=c {
            let rows: Vec<usize> = (0..t_len as isize)
                .map(|t| {
                    let s = t + off;
                    if s < 0 || s >= t_len as isize {
                        t_len
                    } else {
                        s as usize
                    }
                })
                .collect();
            windows.push(tape.embedding(padded, &rows)?);
        }
        let cat = tape.concat(&windows, 1)?;
        let z = tape.matmul(cat, vars.window_w)?;
        let z = tape.add(z, vars.window_b)?;
        let z = tape.tanh(z);
        let Some((wx, wh, b)) = vars.rnn else {
            return Ok(z);
        };
        let xw = tape.matmul(z, wx)?;
        let xw = tape.add(xw, b)?;
        let hs = self.recur(tape, xw, wh, t_len)?;
        Ok(tape.add(z, hs)?)
    }

    /// Elman recurrence `h_t = tanh(xw_t + h_{t-1} Wh)` over the rows of `xw`.
    fn recur(&self, tape: &mut Tape, xw: Var, wh: Var, len: usize) -> Result<Var> {
        let mut rows = Vec::with_capacity(len);
        let mut prev: Option<Var> = None;
        for t in 0..len {
            let mut pre = tape.slice(xw, 0, t, t + 1)?;
            if let Some(h) = prev {
                let r = tape.matmul(h, wh)?;
                pre = tape.add(pre, r)?;
            }
            let h = tape.tanh(pre);
            rows.push(h);
            prev = Some(h);
        }
        Ok(tape.concat(&rows, 0)?)
    }

    /// Prediction-network states `[U+1, pred_dim]` for prefixes of `tokens`.
    pub fn prediction_on(&self, tape: &mut Tape, vars: &HatVars, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mut idx = Vec::with_capacity(tokens.len() + 1);
        idx.push(self.config.vocab_size);
        idx.extend(tokens.iter().map(|&t| t as usize));
        let x = tape.embedding(vars.label_embed, &idx)?;
        let xw = tape.matmul(x, vars.pred_wx)?;
        let xw = tape.add(xw, vars.pred_b)?;
        self.recur(tape, xw, vars.pred_wh, idx.len())
    }

    /// Joint hidden activations for the given encoder rows and prediction rows.
    ///
    /// `enc_proj` is `[T, J]` (already projected, with bias), `pred_proj` is
    /// `[U+1, J]`; the result enumerates nodes as `t * (U+1) + u`.
    pub(crate) fn joint_hidden_on(
        &self,
        tape: &mut Tape,
        enc_proj: Var,
        pred_proj: Var,
    ) -> Result<Var> {
        let t_len = tape.shape(enc_proj)[0];
        let u1 = tape.shape(pred_proj)[0];
        let t_idx: Vec<usize> = (0..t_len).flat_map(|t| std::iter::repeat(t).take(u1)).collect();
        let u_idx: Vec<usize> = (0..t_len).flat_map(|_| 0..u1).collect();
        let eg = tape.embedding(enc_proj, &t_idx)?;
        let pg = tape.embedding(pred_proj, &u_idx)?;
        let s = tape.add(eg, pg)?;
        Ok(tape.tanh(s))
    }

    pub(crate) fn enc_proj_on(&self, tape: &mut Tape, vars: &HatVars, enc: Var) -> Result<Var> {
        let p = tape.matmul(enc, vars.joint_enc)?;
        Ok(tape.add(p, vars.joint_enc_b)?)
    }

    pub(crate) fn pred_proj_on(&self, tape: &mut Tape, vars: &HatVars, pred: Var) -> Result<Var> {
        Ok(tape.matmul(pred, vars.joint_pred)?)
    }

    /// Per-token ILM scores `[L, 1]` from prediction states `[L+1, P]`.
    ///
    /// The encoder contribution is an all-zero state, so only the joint bias
    /// remains on the acoustic side.
    pub fn ilm_on(
        &self,
        tape: &mut Tape,
        vars: &HatVars,
        pred: Var,
        tokens: &[u32],
    ) -> Result<Var> {
        let l = tokens.len();
        let v = self.config.vocab_size;
        if l == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, 1])));
        }
        let zero_enc = tape.constant(Tensor::zeros(&[1, self.config.enc_dim]));
        let ep = self.enc_proj_on(tape, vars, zero_enc)?;
        let rows = tape.slice(pred, 0, 0, l)?;
        let pp = self.pred_proj_on(tape, vars, rows)?;
        let h = tape.add(pp, ep)?;
        let h = tape.tanh(h);
        let logits = tape.matmul(h, vars.label_w)?;
        let logits = tape.add(logits, vars.label_b)?;
        let lp = tape.log_softmax(logits);
        let flat = tape.reshape(lp, &[l * v, 1])?;
        let pick: Vec<usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, &y)| i * v + y as usize)
            .collect();
        Ok(tape.embedding(flat, &pick)?)
    }

    /// Encoder states for one utterance, without gradients.
    pub fn encode(&self, utterance: &Utterance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let e = self.encode_on(&mut tape, &vars, &utterance.acoustics)?;
        Ok(tape.value(e).clone())
    }

    /// Blank probabilities and label log-distributions over the lattice grid.
    pub fn joint_locals(&self, enc: &Tensor, prefix: &[u32]) -> Result<LatticeLocals> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let e = tape.constant(enc.clone());
        let pred = self.prediction_on(&mut tape, &vars, prefix)?;
        let (blank_logit, label_lp) = self.locals_on(&mut tape, &vars, e, pred, true)?;
        let blank_logit = tape.value(blank_logit).data();
        let label = label_lp.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
        Ok(LatticeLocals::new(
            enc.shape()[0],
            prefix.len() + 1,
            self.config.vocab_size,
            blank_logit,
            label,
        ))
    }

    /// `log P_E2E(Y|X)` summed over all monotonic alignments.
    pub fn full_sum_log_prob(&self, utterance: &Utterance, tokens: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let enc = self.encode_on(&mut tape, &vars, &utterance.acoustics)?;
        let s = self.score_on(&mut tape, &vars, enc, tokens, false)?;
        Ok(tape.value(s.full_sum).item()?)
    }

    pub fn internal_lm_log_prob(&self, tokens: &[u32]) -> Result<IlmScore> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let pred = self.prediction_on(&mut tape, &vars, tokens)?;
        let s = self.ilm_on(&mut tape, &vars, pred, tokens)?;
        Ok(IlmScore::new(tape.value(s).data().to_vec()))
    }

    /// Mean negative full-sum log-likelihood of the references.
    pub fn mle_loss_on(&self, tape: &mut Tape, vars: &HatVars, batch: &[Utterance]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut terms = Vec::with_capacity(batch.len());
        for utt in batch {
            let enc = self.encode_on(tape, vars, &utt.acoustics)?;
            let s = self.score_on(tape, vars, enc, &utt.reference, false)?;
            terms.push(tape.reshape(s.full_sum, &[1])?);
        }
        let all = tape.concat(&terms, 0)?;
        let total = tape.sum(all);
        Ok(tape.scale(total, -1.0 / batch.len() as f64))
    }

    pub fn mle_loss(&self, batch: &[Utterance]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let l = self.mle_loss_on(&mut tape, &vars, batch)?;
        Ok(tape.value(l).item()?)
    }

    /// Full-sum log-probability and per-token ILM scores of one sequence.
    pub fn score_on(
        &self,
        tape: &mut Tape,
        vars: &HatVars,
        enc: Var,
        tokens: &[u32],
        with_ilm: bool,
    ) -> Result<SequenceScore> {
        let pred = self.prediction_on(tape, vars, tokens)?;
        let full_sum = self.full_sum_on(tape, vars, enc, pred, tokens)?;
        let ilm = if with_ilm {
            Some(self.ilm_on(tape, vars, pred, tokens)?)
        } else {
            None
        };
        Ok(SequenceScore { full_sum, ilm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(acoustics: Vec<u32>, reference: Vec<u32>) -> Utterance {
        Utterance {
            id: "u".into(),
            acoustics,
            reference,
        }
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let m = HatModel::new(HatConfig::new(6, 5), 1).unwrap();
        let u = utt(vec![3], vec![]);
        let e = m.encode(&u).unwrap();
        assert_eq!(e.shape(), &[1, 32]);
        let u = utt(vec![1, 2, 3, 4], vec![]);
        assert_eq!(m.encode(&u).unwrap(), m.encode(&u).unwrap());
    }

    #[test]
    fn recurrent_encoder_is_order_sensitive() {
        let mut cfg = HatConfig::new(6, 5);
        cfg.context = 0;
        let m = HatModel::new(cfg, 9).unwrap();
        let a = m.encode(&utt(vec![1, 2, 3], vec![])).unwrap();
        let b = m.encode(&utt(vec![3, 2, 1], vec![])).unwrap();
        // frame 1 ("2") sits at the same position in both orders; only the
        // recurrent state distinguishes them
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn empty_acoustics_rejected() {
        let m = HatModel::new(HatConfig::new(6, 5), 1).unwrap();
        assert!(matches!(m.encode(&utt(vec![], vec![])), Err(Error::EmptyAcoustics)));
        assert!(matches!(
            m.encode(&utt(vec![6], vec![])),
            Err(Error::SymbolOutOfRange { .. })
        ));
    }

    #[test]
    fn prefix_token_outside_vocab_rejected() {
        let m = HatModel::new(HatConfig::new(6, 5), 1).unwrap();
        let e = m.encode(&utt(vec![1, 2], vec![])).unwrap();
        assert!(matches!(
            m.joint_locals(&e, &[1, 5]),
            Err(Error::TokenOutOfRange { token: 5, size: 5 })
        ));
    }

    #[test]
    fn zero_heads_give_uniform_and_half() {
        let mut m = HatModel::new(HatConfig::new(6, 5), 3).unwrap();
        m.zero_label_head();
        m.set_constant_blank_logit(0.0);
        let e = m.encode(&utt(vec![1, 2, 0], vec![])).unwrap();
        let loc = m.joint_locals(&e, &[4, 0]).unwrap();
        assert_eq!(loc.frames(), 3);
        assert_eq!(loc.label_positions(), 3);
        for t in 0..3 {
            for u in 0..3 {
                assert_eq!(loc.blank_prob(t, u), 0.5);
                for &lp in loc.label_log_probs(t, u) {
                    assert!((lp + 5f64.ln()).abs() < 1e-15);
                }
            }
        }
        let ilm = m.internal_lm_log_prob(&[0, 4, 2]).unwrap();
        for s in &ilm.per_token {
            assert!((s + 5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_ilm_is_zero() {
        let m = HatModel::new(HatConfig::new(6, 5), 3).unwrap();
        let ilm = m.internal_lm_log_prob(&[]).unwrap();
        assert!(ilm.per_token.is_empty());
        assert_eq!(ilm.total, 0.0);
    }

    #[test]
    fn single_frame_empty_label_is_log_blank() {
        let m = HatModel::new(HatConfig::new(6, 5), 4).unwrap();
        let u = utt(vec![2], vec![]);
        let e = m.encode(&u).unwrap();
        let loc = m.joint_locals(&e, &[]).unwrap();
        let lp = m.full_sum_log_prob(&u, &[]).unwrap();
        assert!((lp - loc.blank_prob(0, 0).ln()).abs() < 1e-12);
    }

    #[test]
    fn mle_loss_definition() {
        let m = HatModel::new(HatConfig::new(6, 5), 4).unwrap();
        let u = utt(vec![2, 3, 1], vec![4, 1]);
        let l = m.mle_loss(std::slice::from_ref(&u)).unwrap();
        assert_eq!(l, -m.full_sum_log_prob(&u, &u.reference).unwrap());
        assert!(l > 0.0);
        assert!(matches!(m.mle_loss(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join(format!("hatlm-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let m = HatModel::new(HatConfig::new(6, 5), 4).unwrap();
        m.save(&path, serde_json::json!({"seed": 4})).unwrap();
        let back = HatModel::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params.to_bytes(), m.params.to_bytes());
        std::fs::remove_dir_all(&dir).ok();
    }
}
