//! Tape-free evaluation of the HAT for search.
//!
//! Mirrors the differentiable path operation by operation (same accumulation
//! order), so values agree with the tape to the last bit in practice; search
//! only relies on them agreeing to rounding.

use std::sync::Arc;

use hatlm_autodiff::{log_sum_exp, matmul_into};

use super::model::HatModel;
use crate::error::{Error, Result};

/// Prediction-network state after consuming a label prefix.
#[derive(Clone, Debug)]
pub struct PredState {
    hidden: Arc<Vec<f64>>,
    /// Projection of `hidden` into the joint space.
    proj: Arc<Vec<f64>>,
}

/// Output distribution at one lattice node.
#[derive(Clone, Debug)]
pub struct NodeDist {
    pub log_blank: f64,
    pub log_no_blank: f64,
    pub label_log_probs: Vec<f64>,
}

pub struct HatRuntime<'a> {
    model: &'a HatModel,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    matmul_into(x, w, &mut out, rows, k, n);
    if let Some(b) = b {
        for (i, o) in out.iter_mut().enumerate() {
            *o += b[i % n];
        }
    }
    out
}

fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|x| *x -= lse);
}

impl<'a> HatRuntime<'a> {
    pub fn new(model: &'a HatModel) -> Self {
        Self { model }
    }

    fn p(&self, id: hatlm_autodiff::ParamId) -> &'a [f64] {
        self.model.params.get(id).data()
    }

    pub fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    /// Encoder states, row-major `[T, enc_dim]`.
    pub fn encode(&self, acoustics: &[u32]) -> Result<Vec<f64>> {
        let c = &self.model.config;
        let ids = &self.model.ids;
        let t_len = acoustics.len();
        if t_len == 0 {
            return Err(Error::EmptyAcoustics);
        }
        if let Some(&symbol) = acoustics.iter().find(|&&s| s as usize >= c.acoustic_vocab) {
            return Err(Error::SymbolOutOfRange {
                symbol,
                size: c.acoustic_vocab,
            });
        }
        let e = c.embed_dim;
        let emb = self.p(ids.acoustic_embed);
        let width = (2 * c.context + 1) * e;
        let mut cat = vec![0.0; t_len * width];
        let ctx = c.context as isize;
        for t in 0..t_len {
            for (w, off) in (-ctx..=ctx).enumerate() {
                let s = t as isize + off;
                if s < 0 || s >= t_len as isize {
                    continue;
                }
                let sym = acoustics[s as usize] as usize;
                cat[t * width + w * e..t * width + (w + 1) * e]
                    .copy_from_slice(&emb[sym * e..(sym + 1) * e]);
            }
        }
        let h = c.enc_dim;
        let mut z = affine(&cat, self.p(ids.window_w), Some(self.p(ids.window_b)), t_len, width, h);
        z.iter_mut().for_each(|x| *x = x.tanh());
        let Some((wx, wh, b)) = ids.rnn else {
            return Ok(z);
        };
        let xw = affine(&z, self.p(wx), Some(self.p(b)), t_len, h, h);
        let wh = self.p(wh);
        let mut prev: Vec<f64> = Vec::new();
        let mut out = z;
        for t in 0..t_len {
            let mut pre = xw[t * h..(t + 1) * h].to_vec();
            if t > 0 {
                let r = affine(&prev, wh, None, 1, h, h);
                pre.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            }
            pre.iter_mut().for_each(|x| *x = x.tanh());
            out[t * h..(t + 1) * h]
                .iter_mut()
                .zip(&pre)
                .for_each(|(a, b)| *a += b);
            prev = pre;
        }
        Ok(out)
    }

    /// Joint-space projection of encoder states, `[T, joint_dim]`.
    pub fn project_encoder(&self, enc: &[f64]) -> Vec<f64> {
        let c = &self.model.config;
        let ids = &self.model.ids;
        let rows = enc.len() / c.enc_dim;
        affine(
            enc,
            self.p(ids.joint_enc),
            Some(self.p(ids.joint_enc_b)),
            rows,
            c.enc_dim,
            c.joint_dim,
        )
    }

    fn pred_from_input(&self, index: usize, prev: Option<&PredState>) -> PredState {
        let c = &self.model.config;
        let ids = &self.model.ids;
        let (e, p) = (c.embed_dim, c.pred_dim);
        let emb = &self.p(ids.label_embed)[index * e..(index + 1) * e];
        let mut pre = affine(emb, self.p(ids.pred_wx), Some(self.p(ids.pred_b)), 1, e, p);
        if let Some(prev) = prev {
            let r = affine(&prev.hidden, self.p(ids.pred_wh), None, 1, p, p);
            pre.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
        pre.iter_mut().for_each(|x| *x = x.tanh());
        let proj = affine(&pre, self.p(ids.joint_pred), None, 1, p, c.joint_dim);
        PredState {
            hidden: Arc::new(pre),
            proj: Arc::new(proj),
        }
    }

    pub fn start(&self) -> PredState {
        self.pred_from_input(self.model.config.vocab_size, None)
    }

    pub fn advance(&self, state: &PredState, token: u32) -> PredState {
        self.pred_from_input(token as usize, Some(state))
    }

    fn head(&self, hidden: &[f64], with_blank: bool) -> (f64, Vec<f64>) {
        let c = &self.model.config;
        let ids = &self.model.ids;
        let (j, v) = (c.joint_dim, c.vocab_size);
        let z = if with_blank {
            affine(hidden, self.p(ids.blank_w), Some(self.p(ids.blank_b)), 1, j, 1)[0]
        } else {
            0.0
        };
        let mut logits = affine(hidden, self.p(ids.label_w), Some(self.p(ids.label_b)), 1, j, v);
        log_softmax_in_place(&mut logits);
        (z, logits)
    }

    /// Distribution at the node pairing encoder frame `enc_proj_row` with `pred`.
    pub fn node(&self, enc_proj_row: &[f64], pred: &PredState) -> NodeDist {
        let hidden: Vec<f64> = enc_proj_row
            .iter()
            .zip(pred.proj.iter())
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let (z, label_log_probs) = self.head(&hidden, true);
        NodeDist {
            log_blank: -softplus(-z),
            log_no_blank: -softplus(z),
            label_log_probs,
        }
    }

    /// Internal-LM next-label log-distribution after the prefix behind `pred`.
    pub fn ilm_next(&self, pred: &PredState) -> Vec<f64> {
        let c = &self.model.config;
        let ids = &self.model.ids;
        let zero = vec![0.0; c.enc_dim];
        let ep = affine(
            &zero,
            self.p(ids.joint_enc),
            Some(self.p(ids.joint_enc_b)),
            1,
            c.enc_dim,
            c.joint_dim,
        );
        let hidden: Vec<f64> = pred
            .proj
            .iter()
            .zip(&ep)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        self.head(&hidden, false).1
    }
}
