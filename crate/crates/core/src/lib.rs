//! Desk-scale toolkit for masked-predictive self-supervised speech
//! pre-training and magnitude-mask speech enhancement.
//!
//! The pipeline has two stages. Stage one pre-trains a CNN + transformer
//! encoder on unlabeled audio by predicting targets (discrete k-means
//! classes or clean log-mel frames) at masked frame positions, optionally
//! with SNR-controlled noise mixing of the input. Stage two freezes the
//! encoder and fine-tunes a bi-directional recurrent head that estimates a
//! per-bin magnitude mask for enhancement, trained with an L2 signal
//! restoration loss.
//!
//! Supporting machinery: a deterministic mixture simulator with manifest
//! and recipe files, a minimal reverse-mode autodiff tensor graph with
//! finite-difference verification, SDR and oracle-mask evaluation, and a
//! line-oriented config + CLI harness tying it all together.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dsp;
pub mod metrics;
pub mod mixsim;
pub mod models;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;

pub use audio::AudioBuffer;
pub use dsp::{ComplexSpectrogram, FbankFeatures, MagnitudeSpectrogram, StftConfig};
pub use mixsim::{DatasetManifest, MixtureRecipe, ResourceCondition};
pub use tensor::{Graph, ParamStore, Real, Var};

/// Sample rate every pipeline stage assumes, in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// 64-bit FNV-1a over a byte slice. Used for config hashes, checkpoint
/// footers, and per-utterance seed derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a per-item seed from a global seed and an item index, so that
/// fan-out across workers is independent of scheduling.
pub fn derive_seed(global_seed: u64, index: u64) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&global_seed.to_le_bytes());
    bytes[8..].copy_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}
