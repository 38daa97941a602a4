use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmState};
use crate::error::{Error, Result};

pub(super) const KIND: &str = "ngram";
const BOS: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smoothing {
    None,
    AddK { k: f64 },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::AddK { k: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<u32, u64>,
}

/// Count-based n-gram model with add-k smoothing.
///
/// Outcomes are the vocabulary, then the unknown token (when enabled), then
/// end-of-sentence (when enabled).
#[derive(Clone, Debug, PartialEq)]
pub struct NGramLm {
    order: usize,
    vocab_size: usize,
    smoothing: Smoothing,
    unk: bool,
    eos: bool,
    tables: BTreeMap<Vec<u32>, ContextCounts>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    version: u32,
    order: usize,
    vocab_size: usize,
    smoothing: Smoothing,
    unk: bool,
    eos: bool,
}

#[derive(Serialize, Deserialize)]
struct TableLine {
    /// `-1` marks the sentence-start pad.
    context: Vec<i64>,
    total: u64,
    counts: Vec<(u32, u64)>,
}

impl NGramLm {
    pub fn train(
        corpus: &[Vec<u32>],
        vocab_size: usize,
        order: usize,
        smoothing: Smoothing,
        unk: bool,
        eos: bool,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::config("n-gram order must be at least 1"));
        }
        if corpus.is_empty() {
            return Err(Error::config("n-gram training corpus is empty"));
        }
        if let Smoothing::AddK { k } = smoothing {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::config("add-k constant must be positive"));
            }
        }
        let mut lm = Self {
            order,
            vocab_size,
            smoothing,
            unk,
            eos,
            tables: BTreeMap::new(),
        };
        for sentence in corpus {
            let mut ctx = vec![BOS; order - 1];
            for &w in sentence {
                let y = lm.outcome(w).ok_or(Error::TokenOutOfRange {
                    token: w,
                    size: vocab_size,
                })?;
                lm.count(&ctx, y);
                lm.shift(&mut ctx, y);
            }
            if eos {
                let e = lm.eos_id();
                lm.count(&ctx, e);
            }
        }
        Ok(lm)
    }

    fn count(&mut self, ctx: &[u32], y: u32) {
        let c = self.tables.entry(ctx.to_vec()).or_default();
        c.total += 1;
        *c.next.entry(y).or_default() += 1;
    }

    fn shift(&self, ctx: &mut Vec<u32>, y: u32) {
        if self.order > 1 {
            ctx.remove(0);
            ctx.push(y);
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_outcomes(&self) -> usize {
        self.vocab_size + usize::from(self.unk) + usize::from(self.eos)
    }

    fn eos_id(&self) -> u32 {
        (self.vocab_size + usize::from(self.unk)) as u32
    }

    fn outcome(&self, token: u32) -> Option<u32> {
        if (token as usize) < self.vocab_size {
            Some(token)
        } else if self.unk {
            Some(self.vocab_size as u32)
        } else {
            None
        }
    }

    fn log_prob(&self, ctx: &[u32], y: u32) -> f64 {
        self.log_prob_in(self.tables.get(ctx), y)
    }

    fn log_prob_in(&self, table: Option<&ContextCounts>, y: u32) -> f64 {
        let k = match self.smoothing {
            Smoothing::None => 0.0,
            Smoothing::AddK { k } => k,
        };
        let o = self.num_outcomes() as f64;
        match table {
            Some(c) if c.total > 0 => {
                let cy = c.next.get(&y).copied().unwrap_or(0) as f64;
                ((cy + k) / (c.total as f64 + k * o)).ln()
            }
            // unseen history: every outcome equally likely
            _ => (1.0 / o).ln(),
        }
    }

    /// Log-probabilities of every outcome (vocabulary, unknown, end-of-sentence).
    pub fn outcome_log_probs(&self, state: &LmState) -> Vec<f64> {
        let ctx = self.context(state);
        (0..self.num_outcomes() as u32)
            .map(|y| self.log_prob(ctx, y))
            .collect()
    }

    fn context<'a>(&self, state: &'a LmState) -> &'a [u32] {
        match state {
            LmState::Context(c) => c,
            LmState::Hidden(_) => panic!("n-gram model given a recurrent state"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            format: "hatlm-lm".into(),
            kind: KIND.into(),
            version: 1,
            order: self.order,
            vocab_size: self.vocab_size,
            smoothing: self.smoothing,
            unk: self.unk,
            eos: self.eos,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (ctx, c) in &self.tables {
            let line = TableLine {
                context: ctx
                    .iter()
                    .map(|&x| if x == BOS { -1 } else { i64::from(x) })
                    .collect(),
                total: c.total,
                counts: c.next.iter().map(|(&y, &n)| (y, n)).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty LM file", path.display())))??;
        let h: Header = serde_json::from_str(&first)?;
        if h.kind != KIND || h.version != 1 {
            return Err(Error::Format(format!(
                "{}: expected n-gram LM version 1",
                path.display()
            )));
        }
        let mut tables = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TableLine = serde_json::from_str(&line)?;
            let ctx = t
                .context
                .iter()
                .map(|&x| if x < 0 { BOS } else { x as u32 })
                .collect();
            tables.insert(
                ctx,
                ContextCounts {
                    total: t.total,
                    next: t.counts.into_iter().collect(),
                },
            );
        }
        Ok(Self {
            order: h.order,
            vocab_size: h.vocab_size,
            smoothing: h.smoothing,
            unk: h.unk,
            eos: h.eos,
            tables,
        })
    }
}

impl LanguageModel for NGramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self) -> LmState {
        LmState::Context(vec![BOS; self.order - 1])
    }

    fn next_log_probs(&self, state: &LmState) -> Vec<f64> {
        let table = self.tables.get(self.context(state));
        (0..self.vocab_size as u32)
            .map(|y| self.log_prob_in(table, y))
            .collect()
    }

    fn advance(&self, state: &LmState, token: u32) -> (LmState, f64) {
        let mut ctx = self.context(state).to_vec();
        match self.outcome(token) {
            Some(y) => {
                let lp = self.log_prob(&ctx, y);
                self.shift(&mut ctx, y);
                (LmState::Context(ctx), lp)
            }
            None => (LmState::Context(ctx), f64::NEG_INFINITY),
        }
    }

    fn eos_log_prob(&self, state: &LmState) -> Option<f64> {
        self.eos
            .then(|| self.log_prob(self.context(state), self.eos_id()))
    }
}
