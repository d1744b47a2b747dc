//! Built-in synthetic corpus generator so the full pipeline runs with no
//! external data: harmonic "speech" clips with syllabic envelopes and
//! filtered-noise clips, written as WAV files with manifests.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioBuffer};
use crate::mixsim::{ClipKind, DatasetManifest, ManifestEntry, MixError, Result};
use crate::{derive_seed, SAMPLE_RATE};

/// Harmonic tone stack with vibrato and a syllable-rate amplitude envelope.
/// The envelope never reaches zero so every region carries energy.
pub fn speech_clip(seconds: f64, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let f0 = 110.0 + 170.0 * rng.random::<f64>();
    let vibrato_hz = 4.0 + 2.0 * rng.random::<f64>();
    let vibrato_depth = 0.005 + 0.01 * rng.random::<f64>();
    let syllable_hz = 2.0 + 2.0 * rng.random::<f64>();
    let peak = 0.12 + 0.08 * rng.random::<f64>();
    let harmonic_amps: Vec<f64> = (1..=5).map(|h| 1.0 / h as f64).collect();
    let phases: Vec<f64> = (0..5)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();

    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for i in 0..n {
        let t = i as f64 / SAMPLE_RATE as f64;
        let inst_f0 = f0 * (1.0 + vibrato_depth * (std::f64::consts::TAU * vibrato_hz * t).sin());
        phase += std::f64::consts::TAU * inst_f0 / SAMPLE_RATE as f64;
        let mut v = 0.0;
        for (h, (&a, &p0)) in harmonic_amps.iter().zip(phases.iter()).enumerate() {
            v += a * ((h as f64 + 1.0) * phase + p0).sin();
        }
        let envelope = 0.35 + 0.65 * 0.5 * (1.0 - (std::f64::consts::TAU * syllable_hz * t).cos());
        samples.push(v * envelope);
    }
    let max = samples.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
    let scale = peak / max;
    AudioBuffer::new(samples.into_iter().map(|s| s * scale).collect())
}

/// White noise through a per-clip one-pole lowpass, RMS-normalized.
pub fn noise_clip(seconds: f64, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let cutoff = 500.0 + 5500.0 * rng.random::<f64>();
    let a = (-std::f64::consts::TAU * cutoff / SAMPLE_RATE as f64).exp();
    let target_rms = 0.03 + 0.03 * rng.random::<f64>();

    let mut samples = Vec::with_capacity(n);
    let mut y = 0.0f64;
    for _ in 0..n {
        let x = rng.random::<f64>() * 2.0 - 1.0;
        y = a * y + (1.0 - a) * x;
        samples.push(y);
    }
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let scale = target_rms / rms;
    AudioBuffer::new(samples.into_iter().map(|s| s * scale).collect())
}

/// Write `n_speech` speech clips and `n_noise` noise clips of
/// `clip_seconds` each under `dir`, with `speech.tsv` and `noise.tsv`
/// manifests. Deterministic given the seed.
pub fn generate_corpus(
    dir: &Path,
    n_speech: usize,
    n_noise: usize,
    clip_seconds: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    std::fs::create_dir_all(dir).map_err(|e| MixError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut speech_entries = Vec::with_capacity(n_speech);
    for i in 0..n_speech {
        let clip = speech_clip(clip_seconds, derive_seed(seed, i as u64));
        let name = format!("speech_{i:03}.wav");
        write_wav(&dir.join(&name), &clip)?;
        speech_entries.push(ManifestEntry {
            clip_id: format!("s{i:03}"),
            path: name.into(),
            duration_s: clip.duration_s(),
            kind: ClipKind::Speech,
        });
    }
    let mut noise_entries = Vec::with_capacity(n_noise);
    for i in 0..n_noise {
        let clip = noise_clip(clip_seconds, derive_seed(seed, (1 << 32) + i as u64));
        let name = format!("noise_{i:03}.wav");
        write_wav(&dir.join(&name), &clip)?;
        noise_entries.push(ManifestEntry {
            clip_id: format!("n{i:03}"),
            path: name.into(),
            duration_s: clip.duration_s(),
            kind: ClipKind::Noise,
        });
    }
    let speech = DatasetManifest::new(dir.to_path_buf(), speech_entries)?;
    let noise = DatasetManifest::new(dir.to_path_buf(), noise_entries)?;
    speech.save(&dir.join("speech.tsv"))?;
    noise.save(&dir.join("noise.tsv"))?;
    Ok((speech, noise))
}
