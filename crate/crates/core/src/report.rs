//! Method x test-set WER table and fusion-weight series, rendered as
//! Markdown.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::wer;
use crate::decoder::NBestList;
use crate::error::{Error, Result};
use crate::train::LogRecord;

/// Top-1 WER of persisted N-best lists against their stored references.
pub fn top1_wer(lists: &[NBestList]) -> Result<f64> {
    let hyps: Vec<Vec<u32>> = lists
        .iter()
        .map(|l| l.best().map(|h| h.tokens.clone()).unwrap_or_default())
        .collect();
    let refs: Vec<Vec<u32>> = lists.iter().map(|l| l.reference.clone()).collect();
    wer(&hyps, &refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPoint {
    pub step: usize,
    pub set: String,
    pub mean_mu: f64,
    pub std_mu: f64,
    pub mean_nu: f64,
    pub std_nu: f64,
}

/// Pulls the weight statistics out of a run log, in log order.
pub fn weight_series(records: &[LogRecord]) -> Vec<WeightPoint> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::WeightStats {
                step,
                set,
                mean_mu,
                std_mu,
                mean_nu,
                std_nu,
            } => Some(WeightPoint {
                step: *step,
                set: set.clone(),
                mean_mu: *mean_mu,
                std_mu: *std_mu,
                mean_nu: *mean_nu,
                std_nu: *std_nu,
            }),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub sets: Vec<String>,
    /// Method name, fusion weights used (if any) and one WER per set.
    pub rows: Vec<ReportRow>,
    pub weights: Vec<WeightPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub lambda_gamma: Option<(f64, f64)>,
    pub wers: Vec<Option<f64>>,
}

impl Report {
    pub fn new(title: impl Into<String>, sets: Vec<String>) -> Self {
        Self {
            title: title.into(),
            sets,
            ..Self::default()
        }
    }

    /// Adds `wer` for (`method`, `set`), creating the row on first use.
    pub fn add(&mut self, method: &str, lambda_gamma: Option<(f64, f64)>, set: &str, wer: f64) -> Result<()> {
        let col = self
            .sets
            .iter()
            .position(|s| s == set)
            .ok_or_else(|| Error::config(format!("unknown test set `{set}`")))?;
        let n = self.sets.len();
        let row = match self.rows.iter().position(|r| r.method == method) {
            Some(i) => &mut self.rows[i],
            None => {
                self.rows.push(ReportRow {
                    method: method.to_string(),
                    lambda_gamma,
                    wers: vec![None; n],
                });
                self.rows.last_mut().expect("just pushed")
            }
        };
        if lambda_gamma.is_some() {
            row.lambda_gamma = lambda_gamma;
        }
        row.wers[col] = Some(wer);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}\n", self.title);
        let _ = writeln!(out, "## WER (%)\n");
        let _ = write!(out, "| method | (lambda, gamma) |");
        for s in &self.sets {
            let _ = write!(out, " {s} |");
        }
        let _ = write!(out, " average |\n|---|---|");
        for _ in 0..=self.sets.len() {
            out.push_str("---:|");
        }
        out.push('\n');
        for r in &self.rows {
            let lg = r
                .lambda_gamma
                .map(|(l, g)| format!("({l:.2}, {g:.2})"))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, "| {} | {lg} |", r.method);
            for w in &r.wers {
                match w {
                    Some(w) => {
                        let _ = write!(out, " {w:.2} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            let present: Vec<f64> = r.wers.iter().flatten().copied().collect();
            if present.len() == r.wers.len() && !present.is_empty() {
                let _ = write!(out, " {:.2} |", present.iter().sum::<f64>() / present.len() as f64);
            } else {
                out.push_str(" - |");
            }
            out.push('\n');
        }
        if !self.weights.is_empty() {
            let _ = writeln!(out, "\n## Learned fusion weights\n");
            out.push_str("| step | set | mean mu | std mu | mean nu | std nu |\n|---:|---|---:|---:|---:|---:|\n");
            for p in &self.weights {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    p.step, p.set, p.mean_mu, p.std_mu, p.mean_nu, p.std_nu
                );
            }
        }
        out
    }
}
