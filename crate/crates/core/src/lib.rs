//! Embedding-conditioned Cycle-GAN many-to-many voice conversion.
//!
//! The crate is organized around one pipeline:
//!
//! * [`dsp`]: waveform to log-mel-spectrogram and back, per-speaker
//!   scaling, Griffin-Lim reconstruction.
//! * [`dataset`]: speaker registry, utterance manifests, training-pair
//!   sampling.
//! * [`autodiff`]: a small reverse-mode tape used by every network here.
//! * [`nets`]: feature extractor, generator and the triple-patch
//!   discriminator.
//! * [`training`]: adversarial + cycle losses and the alternating
//!   optimization loop with resumable checkpoints.
//! * [`convert`]: end-to-end inference, including unseen target speakers.
//! * [`eval`]: speaker-identification substitute and the top-K accuracy
//!   report.
//! * [`cli`]: the `vc` command-line entry points.

pub mod autodiff;
pub mod cli;
pub mod convert;
pub mod dataset;
pub mod dsp;
pub mod eval;
pub mod nets;
pub mod plot;
pub mod training;
