use super::{combine, rank_order};
use crate::error::{Error, Result};
use crate::hat::{HatModel, Utterance};
use crate::lm::LanguageModel;

/// Largest candidate count `exhaustive_search` will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Argmax over every label sequence of length `0..=max_len` of the fused
/// score with exact full-sum E2E terms. Returns the sequence, its score and
/// the number of candidates evaluated.
pub fn exhaustive_search(
    utterance: &Utterance,
    hat: &HatModel,
    elm: Option<&dyn LanguageModel>,
    lambda: f64,
    gamma: f64,
    max_len: usize,
) -> Result<(Vec<u32>, f64, usize)> {
    let v = hat.vocab_size() as u128;
    let mut count: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        count = count.saturating_add(layer);
        layer = layer.saturating_mul(v);
    }
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    if gamma > 0.0 && elm.is_none() {
        return Err(Error::config("gamma > 0 needs an external LM"));
    }
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut seq: Vec<u32> = Vec::new();
    let mut evaluated = 0usize;
    loop {
        let e2e = hat.full_sum_log_prob(utterance, &seq)?;
        let s = hat.internal_lm_log_prob(&seq)?.per_token;
        let r = elm.map(|lm| lm.score_tokens(&seq, false).per_token).unwrap_or_default();
        let score = combine(e2e, &s, &r, None, lambda, gamma);
        evaluated += 1;
        let better = match &best {
            None => true,
            Some((bt, bs)) => rank_order(score, &seq, *bs, bt).is_lt(),
        };
        if better {
            best = Some((seq.clone(), score));
        }
        if !next_sequence(&mut seq, hat.vocab_size() as u32, max_len) {
            break;
        }
    }
    let (tokens, score) = best.expect("at least the empty sequence is scored");
    Ok((tokens, score, evaluated))
}

/// Depth-first successor: extend when possible, otherwise increment.
fn next_sequence(seq: &mut Vec<u32>, v: u32, max_len: usize) -> bool {
    if seq.len() < max_len {
        seq.push(0);
        return true;
    }
    while let Some(last) = seq.pop() {
        if last + 1 < v {
            seq.push(last + 1);
            return true;
        }
    }
    false
}
