use std::collections::HashMap;
use std::sync::Arc;

use hatlm_autodiff::log_sum_exp;
use rayon::prelude::*;

use super::{combine, rank_order, BeamConfig, Hypothesis, NBestList};
use crate::error::{Error, Result};
use crate::hat::{HatModel, HatRuntime, PredState, Utterance};
use crate::lm::{LanguageModel, LmState};

#[derive(Clone)]
struct Partial {
    tokens: Vec<u32>,
    /// Log-mass of the visited paths reaching the current lattice node.
    mass: f64,
    pred: PredState,
    ilm: Vec<f64>,
    elm: Vec<f64>,
    ilm_sum: f64,
    elm_sum: f64,
    lm_state: Option<LmState>,
    ilm_next: Option<Arc<Vec<f64>>>,
    elm_next: Option<Arc<Vec<f64>>>,
}

struct Candidate {
    parent: usize,
    label: u32,
    mass: f64,
    s: f64,
    r: f64,
    score: f64,
}

struct Fusion<'a> {
    lambda: f64,
    gamma: f64,
    elm: Option<&'a dyn LanguageModel>,
}

struct Search<'a, 'm> {
    rt: HatRuntime<'m>,
    cfg: &'a BeamConfig,
    fusion: Option<Fusion<'a>>,
}

impl Search<'_, '_> {
    fn score(&self, mass: f64, ilm_sum: f64, elm_sum: f64) -> f64 {
        match &self.fusion {
            Some(f) => mass - f.lambda * ilm_sum + f.gamma * elm_sum,
            None => mass,
        }
    }

    fn partial_score(&self, p: &Partial) -> f64 {
        self.score(p.mass, p.ilm_sum, p.elm_sum)
    }

    fn prepare(&self, p: &mut Partial) {
        let Some(f) = &self.fusion else { return };
        if p.ilm_next.is_none() {
            p.ilm_next = Some(Arc::new(self.rt.ilm_next(&p.pred)));
        }
        if let (Some(lm), Some(st)) = (f.elm, &p.lm_state) {
            if p.elm_next.is_none() {
                p.elm_next = Some(Arc::new(lm.next_log_probs(st)));
            }
        }
    }

    fn extend(&self, parent: &Partial, c: &Candidate) -> Partial {
        let mut tokens = parent.tokens.clone();
        tokens.push(c.label);
        let mut out = Partial {
            tokens,
            mass: c.mass,
            pred: self.rt.advance(&parent.pred, c.label),
            ilm: parent.ilm.clone(),
            elm: parent.elm.clone(),
            ilm_sum: parent.ilm_sum,
            elm_sum: parent.elm_sum,
            lm_state: None,
            ilm_next: None,
            elm_next: None,
        };
        if let Some(f) = &self.fusion {
            out.ilm.push(c.s);
            out.ilm_sum += c.s;
            if let (Some(lm), Some(st)) = (f.elm, &parent.lm_state) {
                out.elm.push(c.r);
                out.elm_sum += c.r;
                out.lm_state = Some(lm.advance(st, c.label).0);
            }
        }
        out
    }

    fn top_k(&self, mut items: Vec<Partial>) -> Vec<Partial> {
        items.sort_by(|a, b| {
            rank_order(self.partial_score(a), &a.tokens, self.partial_score(b), &b.tokens)
        });
        items.truncate(self.cfg.beam);
        items
    }

    fn run(&self, utterance: &Utterance) -> Result<NBestList> {
        self.cfg.validate()?;
        let enc = self.rt.encode(&utterance.acoustics)?;
        let ep = self.rt.project_encoder(&enc);
        let j = ep.len() / utterance.acoustics.len();
        let v = self.rt.vocab_size();
        let elm = self.fusion.as_ref().and_then(|f| f.elm);

        let mut beam = vec![Partial {
            tokens: Vec::new(),
            mass: 0.0,
            pred: self.rt.start(),
            ilm: Vec::new(),
            elm: Vec::new(),
            ilm_sum: 0.0,
            elm_sum: 0.0,
            lm_state: elm.map(|lm| lm.start()),
            ilm_next: None,
            elm_next: None,
        }];
        for t in 0..utterance.acoustics.len() {
            let row = &ep[t * j..(t + 1) * j];
            let mut ended: Vec<Partial> = Vec::new();
            let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
            let mut frontier = std::mem::take(&mut beam);
            let mut best_ended = f64::NEG_INFINITY;
            for level in 0..=self.cfg.emit_cap {
                let mut cands = Vec::new();
                for (i, h) in frontier.iter_mut().enumerate() {
                    let expand = level < self.cfg.emit_cap && h.tokens.len() < self.cfg.max_len;
                    if expand {
                        self.prepare(h);
                    }
                    let d = self.rt.node(row, &h.pred);
                    let m = h.mass + d.log_blank;
                    let k = match index.get(&h.tokens) {
                        Some(&k) => {
                            let e = &mut ended[k];
                            e.mass = log_sum_exp(&[e.mass, m]);
                            k
                        }
                        None => {
                            index.insert(h.tokens.clone(), ended.len());
                            let mut e = h.clone();
                            e.mass = m;
                            ended.push(e);
                            ended.len() - 1
                        }
                    };
                    best_ended = best_ended.max(self.partial_score(&ended[k]));
                    if !expand {
                        continue;
                    }
                    for y in 0..v {
                        let mass = h.mass + (d.log_no_blank + d.label_log_probs[y]);
                        let s = h.ilm_next.as_ref().map_or(0.0, |x| x[y]);
                        let r = h.elm_next.as_ref().map_or(0.0, |x| x[y]);
                        cands.push(Candidate {
                            parent: i,
                            label: y as u32,
                            mass,
                            s,
                            r,
                            score: self.score(mass, h.ilm_sum + s, h.elm_sum + r),
                        });
                    }
                }
                if let Some(margin) = self.cfg.prune_margin {
                    let floor = best_ended - margin;
                    cands.retain(|c| c.score >= floor);
                }
                if cands.is_empty() {
                    break;
                }
                cands.sort_by(|a, b| {
                    b.score.total_cmp(&a.score).then_with(|| {
                        let ta = frontier[a.parent].tokens.iter().chain(std::iter::once(&a.label));
                        let tb = frontier[b.parent].tokens.iter().chain(std::iter::once(&b.label));
                        ta.cmp(tb)
                    })
                });
                cands.truncate(self.cfg.beam);
                frontier = cands
                    .iter()
                    .map(|c| self.extend(&frontier[c.parent], c))
                    .collect();
            }
            beam = self.top_k(ended);
        }

        let (lambda, gamma) = self
            .fusion
            .as_ref()
            .map_or((0.0, 0.0), |f| (f.lambda, f.gamma));
        let mut hypotheses: Vec<Hypothesis> = beam
            .into_iter()
            .map(|p| {
                let elm_eos = match (elm, &p.lm_state) {
                    (Some(lm), Some(st)) if self.cfg.elm_eos => lm.eos_log_prob(st),
                    _ => None,
                };
                let combined = if self.fusion.is_some() {
                    combine(p.mass, &p.ilm, &p.elm, elm_eos, lambda, gamma)
                } else {
                    p.mass
                };
                Hypothesis {
                    truncated: p.tokens.len() >= self.cfg.max_len,
                    tokens: p.tokens,
                    e2e_search: p.mass,
                    e2e_full_sum: None,
                    ilm: p.ilm,
                    elm: p.elm,
                    elm_eos,
                    combined,
                }
            })
            .collect();
        hypotheses.sort_by(|a, b| rank_order(a.combined, &a.tokens, b.combined, &b.tokens));
        Ok(NBestList {
            utterance_id: utterance.id.clone(),
            reference: utterance.reference.clone(),
            hypotheses,
        })
    }
}

/// Beam search under `e2e - lambda * ILM + gamma * ELM`.
///
/// Per-token ILM scores are always recorded; ELM scores are recorded when
/// `elm` is given. `gamma > 0` requires an ELM.
pub fn beam_search(
    utterance: &Utterance,
    hat: &HatModel,
    elm: Option<&dyn LanguageModel>,
    config: &BeamConfig,
) -> Result<NBestList> {
    if config.gamma > 0.0 && elm.is_none() {
        return Err(Error::config("gamma > 0 needs an external LM"));
    }
    if let Some(lm) = elm {
        if lm.vocab_size() != hat.vocab_size() {
            return Err(Error::config(format!(
                "LM vocabulary {} differs from HAT vocabulary {}",
                lm.vocab_size(),
                hat.vocab_size()
            )));
        }
    }
    Search {
        rt: HatRuntime::new(hat),
        cfg: config,
        fusion: Some(Fusion {
            lambda: config.lambda,
            gamma: config.gamma,
            elm,
        }),
    }
    .run(utterance)
}

/// The same search ranking by E2E score alone, with no LM evaluated.
/// `lambda` and `gamma` in `config` are ignored.
pub fn beam_search_fusion_free(
    utterance: &Utterance,
    hat: &HatModel,
    config: &BeamConfig,
) -> Result<NBestList> {
    Search {
        rt: HatRuntime::new(hat),
        cfg: config,
        fusion: None,
    }
    .run(utterance)
}

/// Decodes utterances in parallel; output order follows input order.
pub fn beam_search_batch(
    utterances: &[Utterance],
    hat: &HatModel,
    elm: Option<&dyn LanguageModel>,
    config: &BeamConfig,
) -> Result<Vec<NBestList>> {
    utterances
        .par_iter()
        .map(|u| beam_search(u, hat, elm, config))
        .collect()
}
