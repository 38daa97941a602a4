//! Word errors, renormalized top-K posteriors and the MWER objectives.

use hatlm_autodiff::{log_sum_exp, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::NBestList;
use crate::error::{Error, Result};
use crate::hat::{HatModel, HatVars, Utterance};
use crate::util::seq_sum;

/// Word-level Levenshtein distance with unit costs.
pub fn nwe<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=reference.len()).collect();
    for (i, h) in hyp.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = diag + usize::from(h != r);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[reference.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwerConfig {
    /// Loss-side ILM weight.
    pub mu: f64,
    /// Loss-side ELM weight.
    pub nu: f64,
    /// Weight of the reference log-likelihood term.
    pub theta: f64,
    /// Let the ILM term backpropagate into the shared decoder.
    pub ilm_grad: bool,
}

impl Default for MwerConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            nu: 0.0,
            theta: 0.005,
            ilm_grad: true,
        }
    }
}

impl MwerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.nu >= 0.0 && self.theta >= 0.0) {
            return Err(Error::config("mu, nu and theta must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKPosterior {
    pub log_probs: Vec<f64>,
    /// `C = -logsumexp` of the unnormalized scores.
    pub normalizer: f64,
}

impl TopKPosterior {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyNBest);
        }
        let normalizer = -log_sum_exp(scores);
        let log_probs = scores.iter().map(|s| s + normalizer).collect();
        Ok(Self {
            log_probs,
            normalizer,
        })
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|x| x.exp()).collect()
    }
}

/// Posterior over the list from `e2e - mu * sum(s) + nu * sum(r)`, using the
/// exact full-sum score where attached.
pub fn renormalize(nbest: &NBestList, mu: f64, nu: f64) -> Result<TopKPosterior> {
    let scores: Vec<f64> = nbest
        .hypotheses
        .iter()
        .map(|h| h.e2e() - mu * h.ilm_total() + nu * h.elm_total())
        .collect();
    TopKPosterior::from_scores(&scores)
}

/// Expected word errors under the posterior.
pub fn mwer_loss(posterior: &TopKPosterior, nbest: &NBestList) -> Result<f64> {
    if posterior.log_probs.len() != nbest.len() {
        return Err(Error::LengthMismatch {
            left: posterior.log_probs.len(),
            right: nbest.len(),
        });
    }
    let terms: Vec<f64> = posterior
        .log_probs
        .iter()
        .zip(&nbest.hypotheses)
        .map(|(lp, h)| lp.exp() * nwe(&h.tokens, &nbest.reference) as f64)
        .collect();
    Ok(seq_sum(&terms))
}

/// Log-posterior `[1, K]` from K scalar score handles.
pub fn renormalize_on(tape: &mut Tape, scores: &[Var]) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::EmptyNBest);
    }
    let mut cols = Vec::with_capacity(scores.len());
    for &s in scores {
        cols.push(tape.reshape(s, &[1, 1])?);
    }
    let row = tape.concat(&cols, 1)?;
    Ok(tape.log_softmax(row))
}

/// `sum_k exp(log_post_k) * errors_k`.
pub fn expected_errors_on(tape: &mut Tape, log_post: Var, errors: &[f64]) -> Result<Var> {
    let k = errors.len();
    let p = tape.exp(log_post);
    let e = tape.constant(Tensor::new(vec![1, k], errors.to_vec())?);
    let w = tape.mul(p, e)?;
    Ok(tape.sum(w))
}

/// Handles produced by one utterance's composite loss.
#[derive(Clone, Copy, Debug)]
pub struct MwerTerms {
    pub loss: Var,
    pub mwer: Var,
    /// Reference full-sum log-probability, when `theta > 0`.
    pub reference_log_prob: Option<Var>,
    pub log_posterior: Var,
}

fn word_errors(nbest: &NBestList, reference: &[u32]) -> Vec<f64> {
    nbest
        .hypotheses
        .iter()
        .map(|h| nwe(&h.tokens, reference) as f64)
        .collect()
}

/// `mwer - theta * log P(Y*|X)` with Eq.-(2) scores rebuilt on the tape.
///
/// ELM scores are taken from the list as constants; the list only supplies
/// token sequences and ELM scores, every E2E and ILM term is recomputed.
pub fn composite_loss_on(
    tape: &mut Tape,
    hat: &HatModel,
    vars: &HatVars,
    utterance: &Utterance,
    nbest: &NBestList,
    config: &MwerConfig,
) -> Result<MwerTerms> {
    config.validate()?;
    if nbest.is_empty() {
        return Err(Error::EmptyNBest);
    }
    let enc = hat.encode_on(tape, vars, &utterance.acoustics)?;
    let mut scores = Vec::with_capacity(nbest.len());
    for h in &nbest.hypotheses {
        let sc = hat.score_on(tape, vars, enc, &h.tokens, true)?;
        let ilm = sc.ilm.expect("requested");
        let mut ilm_total = tape.sum(ilm);
        if !config.ilm_grad {
            let v = tape.value(ilm_total).clone();
            ilm_total = tape.constant(v);
        }
        let a = tape.scale(ilm_total, -config.mu);
        let z = tape.add(sc.full_sum, a)?;
        let r = tape.scalar(config.nu * h.elm_total());
        scores.push(tape.add(z, r)?);
    }
    let log_posterior = renormalize_on(tape, &scores)?;
    let mwer = expected_errors_on(tape, log_posterior, &word_errors(nbest, &utterance.reference))?;
    if config.theta == 0.0 {
        return Ok(MwerTerms {
            loss: mwer,
            mwer,
            reference_log_prob: None,
            log_posterior,
        });
    }
    let reference = hat.score_on(tape, vars, enc, &utterance.reference, false)?.full_sum;
    let anchor = tape.scale(reference, -config.theta);
    let loss = tape.add(mwer, anchor)?;
    Ok(MwerTerms {
        loss,
        mwer,
        reference_log_prob: Some(reference),
        log_posterior,
    })
}

/// Regular MWER with no LM terms anywhere: scores are the E2E full sums.
/// Returns the loss and its expected-error part.
pub fn regular_mwer_loss_on(
    tape: &mut Tape,
    hat: &HatModel,
    vars: &HatVars,
    utterance: &Utterance,
    nbest: &NBestList,
    theta: f64,
) -> Result<(Var, Var)> {
    if nbest.is_empty() {
        return Err(Error::EmptyNBest);
    }
    let enc = hat.encode_on(tape, vars, &utterance.acoustics)?;
    let mut scores = Vec::with_capacity(nbest.len());
    for h in &nbest.hypotheses {
        scores.push(hat.score_on(tape, vars, enc, &h.tokens, false)?.full_sum);
    }
    let log_posterior = renormalize_on(tape, &scores)?;
    let mwer = expected_errors_on(tape, log_posterior, &word_errors(nbest, &utterance.reference))?;
    if theta == 0.0 {
        return Ok((mwer, mwer));
    }
    let reference = hat.score_on(tape, vars, enc, &utterance.reference, false)?.full_sum;
    let anchor = tape.scale(reference, -theta);
    Ok((tape.add(mwer, anchor)?, mwer))
}

/// Mean of per-utterance losses. Empty lists are skipped and counted.
pub fn batch_mean_on(
    tape: &mut Tape,
    mut per_utterance: impl FnMut(&mut Tape, usize) -> Result<Option<Var>>,
    n: usize,
) -> Result<(Option<Var>, usize)> {
    let mut terms = Vec::new();
    let mut skipped = 0;
    for i in 0..n {
        match per_utterance(tape, i)? {
            Some(v) => terms.push(tape.reshape(v, &[1])?),
            None => skipped += 1,
        }
    }
    if terms.is_empty() {
        return Ok((None, skipped));
    }
    let k = terms.len();
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all);
    Ok((Some(tape.scale(total, 1.0 / k as f64)), skipped))
}
