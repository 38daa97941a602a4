//! Experiment configuration: one TOML file, sections overlaid on presets.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hatlm::data::TaskConfig;
use hatlm::decoder::BeamConfig;
use hatlm::lfm::LfmConfig;
use hatlm::lm::Smoothing;
use hatlm::sweep::{GridRange, SweepMode};
use hatlm::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElmKind {
    Ngram,
    Neural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElmSettings {
    pub kind: ElmKind,
    pub order: usize,
    pub smoothing: Smoothing,
    pub eos: bool,
    pub neural_steps: usize,
}

impl Default for ElmSettings {
    fn default() -> Self {
        Self {
            kind: ElmKind::Ngram,
            order: 3,
            smoothing: Smoothing::default(),
            eos: true,
            neural_steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub lambda: GridRange,
    pub gamma: GridRange,
    pub mode: SweepMode,
}

impl Default for SweepSettings {
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
        }
    }
}

/// LFM architecture knobs; sizes tied to the E2E model are filled in later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfmSettings {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub nonnegative: bool,
}

impl Default for LfmSettings {
    fn default() -> Self {
        let c = LfmConfig::new(1, 1);
        Self {
            dim: c.dim,
            heads: c.heads,
            layers: c.layers,
            ffn_dim: c.ffn_dim,
            nonnegative: c.nonnegative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub elm: ElmSettings,
    pub mle: TrainConfig,
    pub mwer: TrainConfig,
    pub lfm: TrainConfig,
    pub lfm_model: LfmSettings,
    pub beam: BeamConfig,
    pub sweep: SweepSettings,
}

impl Default for ExpConfig {
    fn default() -> Self {
        let mle = TrainConfig {
            learning_rate: 3e-3,
            ..TrainConfig::mle()
        };
        Self {
            seed: 0,
            task: TaskConfig::default(),
            elm: ElmSettings::default(),
            mle,
            mwer: TrainConfig::mwer(),
            lfm: TrainConfig::lfm(),
            lfm_model: LfmSettings::default(),
            beam: BeamConfig::default(),
            sweep: SweepSettings::default(),
        }
    }
}

/// Recursively replaces keys of `base` with those present in `over`.
fn overlay(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn reject_unknown(base: &serde_json::Value, over: &serde_json::Value, path: &str) -> Result<()> {
    if let (Some(b), Some(o)) = (base.as_object(), over.as_object()) {
        for (k, v) in o {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match b.get(k) {
                None if !b.is_empty() => {
                    return Err(UsageError(format!("unknown config key `{here}`")).into());
                }
                Some(bv) => reject_unknown(bv, v, &here)?,
                None => {}
            }
        }
    }
    Ok(())
}

fn apply<T: Serialize + DeserializeOwned>(base: &T, over: serde_json::Value) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    reject_unknown(&v, &over, "")?;
    overlay(&mut v, over);
    serde_json::from_value(v).map_err(|e| UsageError(format!("invalid config: {e}")).into())
}

impl ExpConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| UsageError(format!("{e:#}")))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| UsageError(format!("config: {e}")))?;
        let over = serde_json::to_value(table)?;
        // each training section overlays its own preset
        let cfg = apply(&Self::default(), over)?;
        if cfg.mle.regime != hatlm::train::Regime::Mle
            || cfg.mwer.regime != hatlm::train::Regime::Mwer
            || cfg.lfm.regime != hatlm::train::Regime::Lfm
        {
            bail!(UsageError("training sections may not change their regime".into()));
        }
        Ok(cfg)
    }

    /// Propagates the single seed into every seeded component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.task.seed = self.seed;
        self.mle.seed = self.seed;
        self.mwer.seed = self.seed;
        self.lfm.seed = self.seed;
        self
    }

    pub fn hash(&self) -> String {
        hatlm::util::stable_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}
