//! Counterfactual prompting with Direct Preference Optimization, desk scale.
//!
//! The crate bundles everything needed to reproduce style-shift,
//! style-suppression, and instruction-ignoring effects end to end on a
//! built-in tiny causal LM: a tape autodiff engine, the model itself, a
//! deterministic synthetic micro-world, preference-pair synthesis, the DPO
//! and SFT trainers, and the evaluation harness.

pub mod adam;
pub mod client;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod lm;
pub mod pairs;
pub mod tape;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
