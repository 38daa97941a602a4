use hatlm_autodiff::{Tape, Tensor, Var};

use super::model::{HatModel, HatVars};
use crate::error::Result;

/// Tape handles for the score of one label sequence.
#[derive(Clone, Copy, Debug)]
pub struct SequenceScore {
    /// Scalar `log P_E2E(Y|X)`.
    pub full_sum: Var,
    /// Per-token ILM scores `[L, 1]`, when requested.
    pub ilm: Option<Var>,
}

/// Local lattice quantities at every node `(t, u)`.
#[derive(Clone, Debug)]
pub struct LatticeLocals {
    frames: usize,
    positions: usize,
    vocab: usize,
    blank_logit: Vec<f64>,
    label_log_probs: Vec<f64>,
}

fn log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl LatticeLocals {
    pub(crate) fn new(
        frames: usize,
        positions: usize,
        vocab: usize,
        blank_logit: &[f64],
        label_log_probs: Vec<f64>,
    ) -> Self {
        Self {
            frames,
            positions,
            vocab,
            blank_logit: blank_logit.to_vec(),
            label_log_probs,
        }
    }

    /// T.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// U + 1.
    pub fn label_positions(&self) -> usize {
        self.positions
    }

    fn node(&self, t: usize, u: usize) -> usize {
        t * self.positions + u
    }

    pub fn blank_prob(&self, t: usize, u: usize) -> f64 {
        let z = self.blank_logit[self.node(t, u)];
        1.0 / (1.0 + (-z).exp())
    }

    pub fn log_blank(&self, t: usize, u: usize) -> f64 {
        log_sigmoid(self.blank_logit[self.node(t, u)])
    }

    pub fn log_no_blank(&self, t: usize, u: usize) -> f64 {
        log_sigmoid(-self.blank_logit[self.node(t, u)])
    }

    pub fn label_log_probs(&self, t: usize, u: usize) -> &[f64] {
        let n = self.node(t, u);
        &self.label_log_probs[n * self.vocab..(n + 1) * self.vocab]
    }
}

impl HatModel {
    /// Blank logits `[N, 1]` and, optionally, label log-probs `[N, V]`.
    pub(crate) fn locals_on(
        &self,
        tape: &mut Tape,
        vars: &HatVars,
        enc: Var,
        pred: Var,
        with_labels: bool,
    ) -> Result<(Var, Option<Var>)> {
        let ep = self.enc_proj_on(tape, vars, enc)?;
        let pp = self.pred_proj_on(tape, vars, pred)?;
        let h = self.joint_hidden_on(tape, ep, pp)?;
        let z = tape.matmul(h, vars.blank_w)?;
        let z = tape.add(z, vars.blank_b)?;
        let labels = if with_labels {
            let logits = tape.matmul(h, vars.label_w)?;
            let logits = tape.add(logits, vars.label_b)?;
            Some(tape.log_softmax(logits))
        } else {
            None
        };
        Ok((z, labels))
    }

    /// Forward recursion over anti-diagonals of the `T x (U+1)` lattice.
    ///
    /// `alpha(t,u)` is the log-mass of reaching node `(t,u)`; a blank at
    /// `(t,u)` moves to `(t+1,u)`, an emission of `y_{u+1}` moves to
    /// `(t,u+1)`. The sequence score is `alpha(T-1,U) + ln b(T-1,U)`.
    pub(crate) fn full_sum_on(
        &self,
        tape: &mut Tape,
        vars: &HatVars,
        enc: Var,
        pred: Var,
        tokens: &[u32],
    ) -> Result<Var> {
        let t_len = tape.shape(enc)[0];
        let u_len = tokens.len();
        let u1 = u_len + 1;
        let v = self.config.vocab_size;
        let n = t_len * u1;
        let (z, labels) = self.locals_on(tape, vars, enc, pred, u_len > 0)?;
        let log_blank = tape.log_sigmoid(z);

        let Some(labels) = labels else {
            // single column: the only path is T blanks
            return Ok(tape.sum(log_blank));
        };

        let no_blank = tape.softplus(z);
        let no_blank = tape.scale(no_blank, -1.0);
        let flat = tape.reshape(labels, &[n * v, 1])?;
        let neg_inf = tape.constant(Tensor::full(&[1, 1], f64::NEG_INFINITY));
        let flat = tape.concat(&[flat, neg_inf], 0)?;
        let pick: Vec<usize> = (0..n)
            .map(|node| {
                let u = node % u1;
                if u < u_len {
                    node * v + tokens[u] as usize
                } else {
                    n * v
                }
            })
            .collect();
        let label_term = tape.embedding(flat, &pick)?;
        let log_emit = tape.add(no_blank, label_term)?;

        let u_range = |d: usize| {
            let lo = d.saturating_sub(t_len - 1);
            let hi = d.min(u_len);
            (lo, hi)
        };
        let node = |t: usize, u: usize| t * u1 + u;

        let mut alpha = tape.constant(Tensor::zeros(&[1, 1]));
        let last = t_len - 1 + u_len;
        for d in 1..=last {
            let (plo, phi) = u_range(d - 1);
            let prev_nodes: Vec<usize> = (plo..=phi).map(|u| node(d - 1 - u, u)).collect();
            let m_prev = prev_nodes.len();
            let bw = tape.embedding(log_blank, &prev_nodes)?;
            let ew = tape.embedding(log_emit, &prev_nodes)?;
            let from_blank = tape.add(alpha, bw)?;
            let from_emit = tape.add(alpha, ew)?;
            let cand = tape.concat(&[from_blank, from_emit, neg_inf], 0)?;
            let pad = 2 * m_prev;

            let (lo, hi) = u_range(d);
            let mut idx_b = Vec::with_capacity(hi - lo + 1);
            let mut idx_e = Vec::with_capacity(hi - lo + 1);
            for u in lo..=hi {
                let t = d - u;
                // blank predecessor (t-1, u)
                idx_b.push(if t >= 1 && (plo..=phi).contains(&u) {
                    u - plo
                } else {
                    pad
                });
                // emission predecessor (t, u-1)
                idx_e.push(if u >= 1 && (plo..=phi).contains(&(u - 1)) {
                    m_prev + (u - 1 - plo)
                } else {
                    pad
                });
            }
            let gb = tape.embedding(cand, &idx_b)?;
            let ge = tape.embedding(cand, &idx_e)?;
            let pair = tape.concat(&[gb, ge], 1)?;
            let a = tape.logsumexp(pair, 1)?;
            alpha = tape.reshape(a, &[hi - lo + 1, 1])?;
        }
        let final_blank = tape.embedding(log_blank, &[node(t_len - 1, u_len)])?;
        let total = tape.add(alpha, final_blank)?;
        Ok(tape.reshape(total, &[])?)
    }
}
