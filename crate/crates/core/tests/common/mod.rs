//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use hatlm::hat::{HatModel, Utterance};
use hatlm_autodiff::log_sum_exp;

pub fn utt(acoustics: Vec<u32>, reference: Vec<u32>) -> Utterance {
    Utterance {
        id: "t".into(),
        acoustics,
        reference,
    }
}

/// Scores every monotonic alignment path separately and combines them.
pub fn brute_force_full_sum(model: &HatModel, u: &Utterance, tokens: &[u32]) -> f64 {
    let enc = model.encode(u).unwrap();
    let loc = model.joint_locals(&enc, tokens).unwrap();
    let t_len = u.acoustics.len();
    let mut paths = Vec::new();
    fn walk(
        t: usize,
        i: usize,
        acc: f64,
        t_len: usize,
        tokens: &[u32],
        loc: &hatlm::hat::LatticeLocals,
        out: &mut Vec<f64>,
    ) {
        if t == t_len - 1 && i == tokens.len() {
            out.push(acc + loc.log_blank(t, i));
            return;
        }
        if t + 1 < t_len {
            walk(t + 1, i, acc + loc.log_blank(t, i), t_len, tokens, loc, out);
        }
        if i < tokens.len() {
            let w = loc.log_no_blank(t, i) + loc.label_log_probs(t, i)[tokens[i] as usize];
            walk(t, i + 1, acc + w, t_len, tokens, loc, out);
        }
    }
    walk(0, 0, 0.0, t_len, tokens, &loc, &mut paths);
    log_sum_exp(&paths)
}

/// Plain recursive edit distance; exponential, for short inputs only.
pub fn edit_distance_recursive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = usize::from(a[0] != b[0]);
    (edit_distance_recursive(&a[1..], &b[1..]) + sub)
        .min(edit_distance_recursive(&a[1..], b) + 1)
        .min(edit_distance_recursive(a, &b[1..]) + 1)
}

/// Every sequence over `0..v` of length `0..=max_len`, shortest first.
pub fn all_sequences(v: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for y in 0..v {
                let mut t: Vec<u32> = s.clone();
                t.push(y);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Gradient vector in parameter iteration order; absent entries are zero.
pub fn flat_grads(params: &hatlm_autodiff::ParamSet, grads: &hatlm_autodiff::Gradients) -> Vec<f64> {
    params
        .ids()
        .filter(|&id| params.is_trainable(id))
        .flat_map(|id| {
            grads
                .get(params.key(id))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; params.get(id).len()])
        })
        .collect()
}
