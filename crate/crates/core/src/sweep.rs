//! Grid search of scalar fusion weights on two dev sets.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::wer;
use crate::decoder::{beam_search_batch, rescore_components, BeamConfig, NBestList};
use crate::error::{Error, Result};
use crate::hat::{HatModel, Utterance};
use crate::lfm::rescore_scalar;
use crate::lm::LanguageModel;
use crate::report::top1_wer;
use crate::util::write_jsonl;

/// Inclusive arithmetic range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridRange {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.start >= 0.0 && self.stop >= self.start) {
            return Err(Error::config("grid must satisfy 0 <= start <= stop"));
        }
        if !(self.step > 0.0) {
            return Err(Error::config("grid step must be positive"));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        // rounded so that 0.1-steps print and compare cleanly
        Ok((0..=n)
            .map(|i| ((self.start + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    ShallowFusion,
    Rescoring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub lambda: GridRange,
    pub gamma: GridRange,
    pub mode: SweepMode,
    /// Search settings; its fusion weights are replaced per grid point.
    pub beam: BeamConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let g = GridRange {
            start: 0.0,
            stop: 0.8,
            step: 0.1,
        };
        Self {
            lambda: g,
            gamma: g,
            mode: SweepMode::ShallowFusion,
            beam: BeamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub gamma: f64,
    pub wer_dev1: Option<f64>,
    pub wer_dev2: Option<f64>,
    pub average: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub summary: bool,
    pub dev1: String,
    pub dev2: String,
    pub mode: SweepMode,
    pub best_lambda: f64,
    pub best_gamma: f64,
    pub best_average: f64,
    pub evaluations: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

impl SweepResult {
    pub fn best(&self) -> (f64, f64) {
        (self.summary.best_lambda, self.summary.best_gamma)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut lines: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(serde_json::to_value)
            .collect::<std::result::Result<_, _>>()?;
        lines.push(serde_json::to_value(&self.summary)?);
        write_jsonl(path, &lines)
    }
}

static EVALUATIONS: AtomicU64 = AtomicU64::new(0);

/// Grid points evaluated by `run_sweep` in this process so far.
pub fn sweep_evaluations() -> u64 {
    EVALUATIONS.load(Ordering::Relaxed)
}

/// Best hypothesis of every list under `e2e - lambda * sum(s) + gamma * sum(r)`
/// with exact full-sum E2E scores.
pub fn rerank_scalar(lists: &[NBestList], lambda: f64, gamma: f64) -> Result<Vec<Vec<u32>>> {
    lists
        .iter()
        .map(|l| {
            let r = rescore_scalar(l, lambda, gamma)?;
            Ok(r.best().map(|h| h.tokens.clone()).unwrap_or_default())
        })
        .collect()
}

/// LM-free N-best lists with ILM/ELM components and exact full-sum scores.
pub fn rescoring_lists(
    hat: &HatModel,
    elm: &dyn LanguageModel,
    utterances: &[Utterance],
    beam: &BeamConfig,
) -> Result<Vec<NBestList>> {
    let cfg = BeamConfig {
        lambda: 0.0,
        gamma: 0.0,
        ..beam.clone()
    };
    let lists = beam_search_batch(utterances, hat, Some(elm), &cfg)?;
    lists
        .par_iter()
        .zip(utterances)
        .map(|(l, u)| rescore_components(l, hat, u))
        .collect()
}

/// Evaluates every grid point on both dev sets and picks the lowest
/// equal-weight average WER, ties going to the smaller `(lambda, gamma)`.
pub fn run_sweep(
    spec: &SweepSpec,
    hat: &HatModel,
    elm: &dyn LanguageModel,
    dev: [(&str, &[Utterance]); 2],
) -> Result<SweepResult> {
    if dev.iter().any(|(_, d)| d.is_empty()) {
        return Err(Error::config("sweep dev sets must be nonempty"));
    }
    let lambdas = spec.lambda.values()?;
    let gammas = spec.gamma.values()?;
    let points: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| gammas.iter().map(move |&g| (l, g)))
        .collect();

    let eval_point: Box<dyn Fn(f64, f64) -> Result<(f64, f64)> + Sync> = match spec.mode {
        SweepMode::ShallowFusion => Box::new(|lambda, gamma| {
            let cfg = BeamConfig {
                lambda,
                gamma,
                ..spec.beam.clone()
            };
            let a = top1_wer(&beam_search_batch(dev[0].1, hat, Some(elm), &cfg)?)?;
            let b = top1_wer(&beam_search_batch(dev[1].1, hat, Some(elm), &cfg)?)?;
            Ok((a, b))
        }),
        SweepMode::Rescoring => {
            let l1 = rescoring_lists(hat, elm, dev[0].1, &spec.beam)?;
            let l2 = rescoring_lists(hat, elm, dev[1].1, &spec.beam)?;
            let refs = |lists: &[NBestList]| -> Vec<Vec<u32>> {
                lists.iter().map(|l| l.reference.clone()).collect()
            };
            let (r1, r2) = (refs(&l1), refs(&l2));
            Box::new(move |lambda, gamma| {
                let a = wer(&rerank_scalar(&l1, lambda, gamma)?, &r1)?;
                let b = wer(&rerank_scalar(&l2, lambda, gamma)?, &r2)?;
                Ok((a, b))
            })
        }
    };

    EVALUATIONS.fetch_add(points.len() as u64, Ordering::Relaxed);
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(lambda, gamma)| match eval_point(lambda, gamma) {
            Ok((a, b)) => SweepRow {
                lambda,
                gamma,
                wer_dev1: Some(a),
                wer_dev2: Some(b),
                average: Some(0.5 * (a + b)),
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                lambda,
                gamma,
                wer_dev1: None,
                wer_dev2: None,
                average: None,
                status: format!("failed: {e}"),
            },
        })
        .collect();

    let mut best: Option<&SweepRow> = None;
    for r in &rows {
        let Some(avg) = r.average else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bavg = b.average.expect("only ok rows are kept");
                avg < bavg || (avg == bavg && (r.lambda, r.gamma) < (b.lambda, b.gamma))
            }
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("every sweep point failed".into()))?;
    let failed = rows.iter().filter(|r| r.average.is_none()).count();
    let summary = SweepSummary {
        summary: true,
        dev1: dev[0].0.to_string(),
        dev2: dev[1].0.to_string(),
        mode: spec.mode,
        best_lambda: best.lambda,
        best_gamma: best.gamma,
        best_average: best.average.expect("ok row"),
        evaluations: rows.len(),
        failed,
    };
    Ok(SweepResult { rows, summary })
}
