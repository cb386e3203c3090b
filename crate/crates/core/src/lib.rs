//! Adversarial permutation invariant training for universal sound separation.

pub mod checks;
pub mod data;
pub mod dsp;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod perm;
pub mod tensor;
pub mod train;
