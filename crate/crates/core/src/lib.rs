//! Desk-scale laboratory for studying sequential fine-tuning of toy
//! transformers under class-incremental and task-incremental protocols.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`graph`] / [`optim`]: dense `f64` arrays, a reverse-mode
//!   autodiff graph over them, and Adam-family optimizers.
//! * [`transformer`] / [`checkpoint`]: a small trainable transformer backbone
//!   (causal or bidirectional) with a versioned weight-file format.
//! * [`classifier`]: per-task classifier heads (linear, cosine, prototype)
//!   collected in a bank with a global slot map.
//! * [`stream`]: task streams, synthetic multinomial streams with a Bayes
//!   oracle, file ingestion, and a replay buffer.
//! * [`engine`]: the incremental-learning loop, freezing strategies, and
//!   accuracy metrics.
//! * [`probe`] / [`geometry`]: linear probing of frozen backbones and
//!   geometric diagnostics (moving distance, norms, histograms).
//! * [`runner`]: config-driven experiment orchestration and CSV artifacts,
//!   wrapped by the `seqlab` binary.

pub mod checkpoint;
pub mod classifier;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod optim;
pub mod probe;
pub mod runner;
pub mod seed;
pub mod stream;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
