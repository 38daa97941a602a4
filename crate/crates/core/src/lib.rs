//! LM-aware minimum-word-error-rate training for hybrid autoregressive
//! transducers, at desk scale.

pub mod data;
pub mod decoder;
pub mod error;
pub mod hat;
pub mod lfm;
pub mod lm;
pub mod mwer;
pub mod report;
pub mod sweep;
pub mod train;
pub mod util;

pub use error::{Error, Result};
