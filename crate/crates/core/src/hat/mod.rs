//! Hybrid autoregressive transducer: encoder, prediction network, factorized
//! joint, exact lattice scoring and internal-LM extraction.

mod infer;
mod lattice;
mod model;

pub use infer::{HatRuntime, NodeDist, PredState};
pub use lattice::{LatticeLocals, SequenceScore};
pub use model::{HatConfig, HatModel, HatVars, IlmScore, HAT_CHECKPOINT_KIND};

use serde::{Deserialize, Serialize};

/// Paired acoustic-symbol sequence and reference word ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub acoustics: Vec<u32>,
    pub reference: Vec<u32>,
}
