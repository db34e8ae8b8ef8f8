//! Quantization-aware training of small MLP classifiers with adaptive coreset
//! selection.
//!
//! Every training sample is scored with an error-vector score (distance of the
//! quantized prediction from the one-hot label) and a disagreement score
//! (distance from a full-precision teacher's prediction). The two are blended
//! with an annealed coefficient and the top fraction of samples forms the
//! training subset, which is refreshed every `R` epochs.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, softmax/cross-entropy and SGD.
//! * [`quant`]: uniform fake quantization and the straight-through estimator.
//! * [`network`]: the MLP with full-precision and fake-quantized forward modes.
//! * [`scoring`]: per-sample scores, annealing schedules, gradient-norm oracle.
//! * [`selection`]: top-k selection, baseline selectors, coreset files.
//! * [`distill`]: teacher training, KD loss and the teacher output cache.
//! * [`data`]: IDX / CIFAR-10 / synthetic datasets and label-noise tooling.
//! * [`experiment`]: run configuration, the training loop, sweeps and reports.

pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod network;
pub mod numerics;
pub mod quant;
pub mod rng;
pub mod scoring;
pub mod selection;

pub use error::{Error, ErrorKind, Result};
