//! MLE and MWER training loops, run logs and evaluation.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use hatlm_autodiff::{Gradients, Optimizer, OptimizerKind, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::wer;
use crate::decoder::{beam_search, beam_search_batch, beam_search_fusion_free, BeamConfig, NBestList};
use crate::error::{Error, Result};
use crate::hat::{HatModel, Utterance};
use crate::lm::LanguageModel;
use crate::mwer::{composite_loss_on, regular_mwer_loss_on, MwerConfig};
use crate::util::{read_jsonl, seq_sum, stable_hash, write_jsonl};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Mle,
    Mwer,
    Lfm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub nu: f64,
    pub theta: f64,
    /// Copy (lambda, gamma) into (mu, nu).
    pub tie_weights: bool,
    pub ilm_grad: bool,
    pub beam: usize,
    pub emit_cap: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Dev evaluation cadence in steps; 0 disables.
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mle()
    }
}

impl TrainConfig {
    pub fn mle() -> Self {
        Self {
            regime: Regime::Mle,
            lambda: 0.0,
            gamma: 0.0,
            mu: 0.0,
            nu: 0.0,
            theta: 0.005,
            tie_weights: false,
            ilm_grad: true,
            beam: 8,
            emit_cap: 4,
            max_len: 32,
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
            log_every: 10,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    pub fn mwer() -> Self {
        Self {
            regime: Regime::Mwer,
            batch_size: 4,
            steps: 500,
            learning_rate: 1e-4,
            ..Self::mle()
        }
    }

    pub fn lfm() -> Self {
        Self {
            regime: Regime::Lfm,
            batch_size: 4,
            steps: 2000,
            learning_rate: 1e-4,
            theta: 0.0,
            log_every: 100,
            ..Self::mle()
        }
    }

    /// Applies weight tying and the LM-free search of the LFM regime.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.tie_weights {
            c.mu = c.lambda;
            c.nu = c.gamma;
        }
        if c.regime == Regime::Lfm {
            c.lambda = 0.0;
            c.gamma = 0.0;
        }
        let w = [c.lambda, c.gamma, c.mu, c.nu, c.theta];
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::config("fusion weights and theta must be nonnegative"));
        }
        if c.batch_size == 0 || c.beam == 0 {
            return Err(Error::config("batch size and beam must be positive"));
        }
        if !(c.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(c)
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            lambda: self.lambda,
            gamma: self.gamma,
            max_len: self.max_len,
            emit_cap: self.emit_cap,
            ..BeamConfig::default()
        }
    }

    pub fn mwer_config(&self) -> MwerConfig {
        MwerConfig {
            mu: self.mu,
            nu: self.nu,
            theta: self.theta,
            ilm_grad: self.ilm_grad,
        }
    }

    pub fn hash(&self) -> String {
        stable_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        regime: Regime,
        config_hash: String,
        seed: u64,
        config: TrainConfig,
    },
    Step {
        step: usize,
        loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mwer: Option<f64>,
        skipped: usize,
        decodes: u64,
    },
    Eval {
        step: usize,
        set: String,
        wer: f64,
    },
    WeightStats {
        step: usize,
        set: String,
        mean_mu: f64,
        std_mu: f64,
        mean_nu: f64,
        std_nu: f64,
    },
    Checkpoint {
        step: usize,
        file: String,
    },
    Diverged {
        step: usize,
    },
}

/// Append-only training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    /// Per-step loss values, in step order.
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn total_decodes(&self) -> u64 {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { decodes, .. } => Some(*decodes),
                _ => None,
            })
            .sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self {
            records: read_jsonl(path)?,
        })
    }
}

/// Dev sets, checkpoint directory and the fusion LM used for evaluation.
#[derive(Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub dev: &'a [(String, Vec<Utterance>)],
    pub checkpoint_dir: Option<&'a Path>,
    pub eval_beam: Option<&'a BeamConfig>,
    pub eval_elm: Option<&'a dyn LanguageModel>,
}

pub struct TrainOutcome<M> {
    /// Final parameters; after divergence, the last ones whose loss was finite.
    pub model: M,
    pub log: RunLog,
    pub diverged: Option<usize>,
}

/// Epoch-shuffled minibatches from a seeded stream.
pub(crate) struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub(crate) struct StepResult {
    pub loss: f64,
    pub extra: Option<f64>,
    pub skipped: usize,
    pub grads: Gradients,
}

/// Runs `f` per utterance in parallel and averages losses and gradients in
/// input order.
pub(crate) fn batch_step<T, F>(batch: &[T], f: F) -> Result<StepResult>
where
    T: Sync,
    F: Fn(&T) -> Result<Option<(f64, f64, Gradients)>> + Sync,
{
    let parts: Vec<Result<Option<(f64, f64, Gradients)>>> = batch.par_iter().map(|u| f(u)).collect();
    let mut losses = Vec::new();
    let mut extras = Vec::new();
    let mut grads = Gradients::default();
    let mut skipped = 0;
    for p in parts {
        match p? {
            Some((l, e, g)) => {
                losses.push(l);
                extras.push(e);
                grads.merge(g);
            }
            None => skipped += 1,
        }
    }
    let n = losses.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok(StepResult {
        loss: seq_sum(&losses) / n,
        extra: (!extras.is_empty()).then(|| seq_sum(&extras) / n),
        skipped,
        grads,
    })
}

fn grads_finite(g: &Gradients, hat: &HatModel) -> bool {
    hat.params
        .ids()
        .filter_map(|id| g.get(hat.params.key(id)))
        .all(|v| v.iter().all(|x| x.is_finite()))
}

/// Top-1 WER of a decode over `utterances`, with the N-best lists.
pub fn evaluate(
    hat: &HatModel,
    elm: Option<&dyn LanguageModel>,
    utterances: &[Utterance],
    beam: &BeamConfig,
) -> Result<(f64, Vec<NBestList>)> {
    let lists = beam_search_batch(utterances, hat, elm, beam)?;
    let hyps: Vec<Vec<u32>> = lists
        .iter()
        .map(|l| l.best().map(|h| h.tokens.clone()).unwrap_or_default())
        .collect();
    let refs: Vec<Vec<u32>> = utterances.iter().map(|u| u.reference.clone()).collect();
    Ok((wer(&hyps, &refs)?, lists))
}

fn eval_hook(step: usize, cfg: &TrainConfig, hat: &HatModel, hooks: &Hooks, log: &mut RunLog) -> Result<()> {
    if cfg.eval_every == 0 || step % cfg.eval_every != 0 {
        return Ok(());
    }
    let beam = hooks.eval_beam.cloned().unwrap_or_else(|| cfg.beam_config());
    for (name, set) in hooks.dev {
        let (w, _) = evaluate(hat, hooks.eval_elm, set, &beam)?;
        log.push(LogRecord::Eval {
            step,
            set: name.clone(),
            wer: w,
        });
    }
    Ok(())
}

fn checkpoint_hook(step: usize, cfg: &TrainConfig, hat: &HatModel, hooks: &Hooks, log: &mut RunLog) -> Result<()> {
    let Some(dir) = hooks.checkpoint_dir else { return Ok(()) };
    if cfg.checkpoint_every == 0 || step == 0 || step % cfg.checkpoint_every != 0 {
        return Ok(());
    }
    let file = format!("hat-{:?}-{}-s{}-step{step:06}.ckpt", cfg.regime, cfg.hash(), cfg.seed).to_lowercase();
    hat.save(
        &dir.join(&file),
        serde_json::json!({"step": step, "config_hash": cfg.hash(), "seed": cfg.seed}),
    )?;
    log.push(LogRecord::Checkpoint { step, file });
    Ok(())
}

type UttLoss<'a> = dyn Fn(&HatModel, &Utterance) -> Result<Option<(f64, f64, Gradients)>> + Sync + 'a;

fn hat_loop(
    cfg: &TrainConfig,
    mut hat: HatModel,
    train: &[Utterance],
    hooks: &Hooks,
    decodes: &AtomicU64,
    per_utt: &UttLoss,
) -> Result<TrainOutcome<HatModel>> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut log = RunLog::default();
    log.push(LogRecord::Header {
        regime: cfg.regime,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
    });
    let mut sampler = Sampler::new(train.len(), cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate);
    hat.params.set_trainable(true);
    let mut last_good = None;
    for step in 0..cfg.steps {
        eval_hook(step, cfg, &hat, hooks, &mut log)?;
        let batch: Vec<&Utterance> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &train[i])
            .collect();
        let before = decodes.load(Ordering::Relaxed);
        let r = batch_step(&batch, |u: &&Utterance| per_utt(&hat, u))?;
        let used = decodes.load(Ordering::Relaxed) - before;
        if !r.loss.is_finite() || !grads_finite(&r.grads, &hat) {
            if let Some(p) = last_good.take() {
                hat.params = p;
            }
            log.push(LogRecord::Diverged { step });
            return Ok(TrainOutcome {
                model: hat,
                log,
                diverged: Some(step),
            });
        }
        log.push(LogRecord::Step {
            step,
            loss: r.loss,
            mwer: r.extra.filter(|_| cfg.regime != Regime::Mle),
            skipped: r.skipped,
            decodes: used,
        });
        if r.skipped == batch.len() {
            continue;
        }
        last_good = Some(hat.params.clone());
        hat.params.accumulate(&r.grads)?;
        opt.step(&mut hat.params)?;
        checkpoint_hook(step + 1, cfg, &hat, hooks, &mut log)?;
    }
    eval_hook(cfg.steps, cfg, &hat, hooks, &mut log)?;
    Ok(TrainOutcome {
        model: hat,
        log,
        diverged: None,
    })
}

/// Minimizes the mean negative full-sum log-likelihood.
pub fn train_mle(
    config: &TrainConfig,
    init: HatModel,
    train: &[Utterance],
    hooks: &Hooks,
) -> Result<TrainOutcome<HatModel>> {
    let cfg = config.resolved()?;
    let decodes = AtomicU64::new(0);
    let per_utt = |hat: &HatModel, u: &Utterance| -> Result<Option<(f64, f64, Gradients)>> {
        let mut tape = Tape::new();
        let vars = hat.bind(&mut tape);
        let l = hat.mle_loss_on(&mut tape, &vars, std::slice::from_ref(u))?;
        let v = tape.value(l).item()?;
        Ok(Some((v, v, tape.backward(l)?)))
    };
    hat_loop(&cfg, init, train, hooks, &decodes, &per_utt)
}

/// MWER with hypotheses regenerated by fused beam search at every step.
///
/// `(lambda, gamma) = (mu, nu) = 0` is regular MWER.
pub fn train_mwer(
    config: &TrainConfig,
    init: HatModel,
    elm: Option<&dyn LanguageModel>,
    train: &[Utterance],
    hooks: &Hooks,
) -> Result<TrainOutcome<HatModel>> {
    let cfg = config.resolved()?;
    if (cfg.gamma > 0.0 || cfg.nu > 0.0) && elm.is_none() {
        return Err(Error::config("an external LM is needed when gamma or nu is positive"));
    }
    let beam = cfg.beam_config();
    let mwer_cfg = cfg.mwer_config();
    let decodes = AtomicU64::new(0);
    let per_utt = |hat: &HatModel, u: &Utterance| -> Result<Option<(f64, f64, Gradients)>> {
        let nb = beam_search(u, hat, elm, &beam)?;
        decodes.fetch_add(1, Ordering::Relaxed);
        if nb.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let vars = hat.bind(&mut tape);
        let t = composite_loss_on(&mut tape, hat, &vars, u, &nb, &mwer_cfg)?;
        let loss = tape.value(t.loss).item()?;
        let mwer = tape.value(t.mwer).item()?;
        Ok(Some((loss, mwer, tape.backward(t.loss)?)))
    };
    hat_loop(&cfg, init, train, hooks, &decodes, &per_utt)
}

/// Regular MWER through a path that never touches an LM: E2E-only search and
/// E2E-only posteriors. Fusion weights in `config` are ignored.
pub fn train_mwer_fusion_free(
    config: &TrainConfig,
    init: HatModel,
    train: &[Utterance],
    hooks: &Hooks,
) -> Result<TrainOutcome<HatModel>> {
    let cfg = config.resolved()?;
    let beam = cfg.beam_config();
    let theta = cfg.theta;
    let decodes = AtomicU64::new(0);
    let per_utt = |hat: &HatModel, u: &Utterance| -> Result<Option<(f64, f64, Gradients)>> {
        let nb = beam_search_fusion_free(u, hat, &beam)?;
        decodes.fetch_add(1, Ordering::Relaxed);
        if nb.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let vars = hat.bind(&mut tape);
        let (l, m) = regular_mwer_loss_on(&mut tape, hat, &vars, u, &nb, theta)?;
        let v = tape.value(l).item()?;
        let m = tape.value(m).item()?;
        Ok(Some((v, m, tape.backward(l)?)))
    };
    hat_loop(&cfg, init, train, hooks, &decodes, &per_utt)
}
