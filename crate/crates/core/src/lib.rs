//! backroad: a desk-scale study of physical backdoor attacks on a toy
//! vision-language driving assistant.
//!
//! The pipeline has three stages, each usable on its own:
//!
//! 1. **Data poisoning** — take benign driving scenes, embed a physical
//!    trigger object (e.g. a traffic cone patch) into the image, and rewrite
//!    the benign response into a target-behavior response ("brake suddenly").
//!    Every poisoned sample keeps its benign original alongside it as a
//!    *replay* sample ([`dataset::PairedDataset`]).
//! 2. **Backdoor tuning** — fine-tune a small trainable vision-language model
//!    ([`vlm::ToyVlm`]) on a blend of the backdoor loss and the benign replay
//!    loss, weighted by `alpha` ([`tuner`]).
//! 3. **Evaluation** — attack success rate on triggered images, false
//!    activation rate on clean images, a utility check against a cleanly
//!    trained twin, plus ablations (alpha sweep, no-replay, handcrafted
//!    responses) and an incremental fine-tuning defense ([`eval`]).
//!
//! Everything is deterministic under fixed seeds: corpora, trigger placement,
//! model init, batch order, and generation all draw from seeded ChaCha
//! streams, so a campaign re-run with the same config produces byte-identical
//! artifacts.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod rewrite;
pub mod trigger;
pub mod tuner;
pub mod vlm;

pub use error::{Error, Result};
