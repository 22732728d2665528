//! Two-stage continual semantic segmentation on synthetic shape scenes.
//!
//! The model first proposes a fixed set of class-agnostic masks, each with an
//! objectness score, and only then assigns class labels to the surviving
//! proposals through per-task recognition heads. Because mask proposal is
//! class-agnostic, the proposal stage transfers across tasks almost for free;
//! the recognition stage grows one lightweight head per task. Forgetting is
//! contained by distilling objectness scores, proposal masks, positional
//! embeddings, and old-task class posteriors from a frozen snapshot of the
//! previous model.
//!
//! The crate is organised as a pipeline:
//!
//! * [`data`] — synthetic scene generation, task schedules, corpus (de)serialisation;
//! * [`tape`] — a small reverse-mode autodiff engine over `f64` tensors;
//! * [`model`] — encoder, mask decoder, and per-task recognition heads;
//! * [`matching`] — Hungarian assignment of proposals to ground-truth masks;
//! * [`loss`] — supervised segmentation losses and the distillation terms;
//! * [`engine`] — AdamW, the per-task training loop, checkpoints, reports;
//! * [`evalm`] — pixel decoding, IoU / recall metrics, continual aggregates;
//! * [`config`] — run configuration, presets, validation.
//!
//! Everything is deterministic given a seed: batch order, parameter init, and
//! report serialisation are all reproducible bit-for-bit, with or without the
//! `parallel` feature.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evalm;
pub mod kernels;
pub mod loss;
pub mod matching;
pub mod model;
pub mod par;
pub mod params;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
