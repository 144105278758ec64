//! Desk-scale laboratory for adversarial-augmentation training of small
//! sequence-to-sequence models: gradient-based implicit perturbations,
//! gradient-directed token swaps, symmetric-KL objectives, and a
//! word-swap robustness attack with relative-degradation reporting.

pub mod advgrad;
pub mod advswap;
pub mod attacker;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tasks;
pub mod trainer;
