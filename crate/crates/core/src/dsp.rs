//! Deterministic signal transforms: STFT, inverse STFT via weighted
//! overlap-add, magnitude extraction, 80-channel log-mel filterbank, and
//! frame-rate alignment by duplication.
//!
//! Analysis uses a periodic Hann window with no center padding: frame `t`
//! covers samples `[t*hop, t*hop + window_len)`. The inverse applies the
//! same Hann as synthesis window and normalizes each output sample by the
//! summed squared window, which reconstructs the interior exactly for any
//! hop that keeps the denominator positive.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::SAMPLE_RATE;

/// Default analysis setup: 25 ms window, 10 ms hop, 512-point FFT at 16 kHz.
pub const DEFAULT_WINDOW_LEN: usize = 400;
pub const DEFAULT_HOP: usize = 160;
pub const DEFAULT_FFT_SIZE: usize = 512;
/// Log floor for mel energies.
pub const FBANK_FLOOR: f64 = 1e-10;
/// Mel channel count used throughout the pipeline.
pub const N_MELS: usize = 80;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("utterance too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("window does not satisfy reconstruction condition")]
    NotCola,
    #[error("alignment gap too large: target {target} frames exceeds {available} duplicated frames by more than factor {factor}")]
    AlignmentGap {
        target: usize,
        available: usize,
        factor: usize,
    },
}

pub type Result<T> = std::result::Result<T, DspError>;

/// STFT analysis geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
            fft_size: DEFAULT_FFT_SIZE,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window_len {
            0
        } else {
            (num_samples - self.window_len) / self.hop + 1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.fft_size == 0 {
            return Err(DspError::BadParams("zero-sized window, hop or fft".into()));
        }
        if self.window_len > self.fft_size {
            return Err(DspError::BadParams(format!(
                "window_len {} exceeds fft_size {}",
                self.window_len, self.fft_size
            )));
        }
        if self.hop > self.window_len {
            return Err(DspError::BadParams(format!(
                "hop {} exceeds window_len {}",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }
}

/// Complex STFT frames.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// frames x bins, bins == fft_size/2 + 1.
    pub values: Array2<Complex64>,
    pub hop: usize,
    pub window_len: usize,
    pub fft_size: usize,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn config(&self) -> StftConfig {
        StftConfig {
            window_len: self.window_len,
            hop: self.hop,
            fft_size: self.fft_size,
        }
    }

    /// Number of samples the frames span; the istft output length.
    pub fn covered_samples(&self) -> usize {
        if self.frames() == 0 {
            0
        } else {
            (self.frames() - 1) * self.hop + self.window_len
        }
    }

    /// Sample range fully covered by overlapping windows, where the
    /// round-trip identity holds.
    pub fn interior_samples(&self) -> std::ops::Range<usize> {
        let n = self.covered_samples();
        if n < 2 * self.window_len {
            0..0
        } else {
            self.window_len..n - self.window_len
        }
    }
}

/// Nonnegative STFT magnitudes with the producing frame geometry.
#[derive(Debug, Clone)]
pub struct MagnitudeSpectrogram {
    pub values: Array2<f64>,
    pub hop: usize,
    pub window_len: usize,
    pub fft_size: usize,
}

impl MagnitudeSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// frames x 80 log-mel energies.
#[derive(Debug, Clone)]
pub struct FbankFeatures {
    pub values: Array2<f64>,
}

impl FbankFeatures {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Short-time Fourier transform with a periodic Hann window and no center
/// padding. Frame `t` covers samples `[t*hop, t*hop + window_len)`.
pub fn stft(audio: &AudioBuffer, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if audio.len() < cfg.window_len {
        return Err(DspError::TooShort {
            got: audio.len(),
            need: cfg.window_len,
        });
    }
    for (i, s) in audio.samples.iter().enumerate() {
        if !s.is_finite() {
            return Err(DspError::NonFinite(i));
        }
    }
    let frames = cfg.num_frames(audio.len());
    let bins = cfg.bins();
    let window = hann_window(cfg.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);

    let mut values = Array2::<Complex64>::zeros((frames, bins));
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < cfg.window_len {
                Complex64::new(audio.samples[start + i] * window[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().take(bins).enumerate() {
            values[(t, k)] = *v;
        }
    }
    Ok(ComplexSpectrogram {
        values,
        hop: cfg.hop,
        window_len: cfg.window_len,
        fft_size: cfg.fft_size,
    })
}

/// Inverse STFT by weighted overlap-add with per-sample normalization by
/// the summed squared synthesis window. Interior samples reconstruct the
/// original signal; the edges are best-effort.
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
    let cfg = spec.config();
    cfg.validate()?;
    let frames = spec.frames();
    let out_len = spec.covered_samples();
    if frames == 0 {
        return Ok(AudioBuffer::new(Vec::new()));
    }
    if spec.bins() != cfg.bins() {
        return Err(DspError::BadParams(format!(
            "spectrogram has {} bins, geometry implies {}",
            spec.bins(),
            cfg.bins()
        )));
    }
    let window = hann_window(cfg.window_len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.fft_size);

    let mut num = vec![0.0f64; out_len];
    let mut den = vec![0.0f64; out_len];
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for t in 0..frames {
        // Rebuild the full Hermitian spectrum from the half-spectrum.
        for k in 0..spec.bins() {
            buf[k] = spec.values[(t, k)];
        }
        for k in spec.bins()..cfg.fft_size {
            buf[k] = spec.values[(t, cfg.fft_size - k)].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        let scale = 1.0 / cfg.fft_size as f64;
        for i in 0..cfg.window_len {
            let sample = buf[i].re * scale;
            num[start + i] += window[i] * sample;
            den[start + i] += window[i] * window[i];
        }
    }

    let interior = spec.interior_samples();
    // Edge samples are covered by the tail of a single window; dividing a
    // modified (non-consistent) spectrum by a vanishing window sum there
    // amplifies it without bound. Floor the denominator at a fraction of
    // its plateau: interior samples are untouched, edges attenuate
    // instead of exploding.
    let max_den = den.iter().cloned().fold(0.0f64, f64::max);
    let floor = 0.25 * max_den;
    let mut samples = vec![0.0f64; out_len];
    for i in 0..out_len {
        if den[i] == 0.0 && interior.contains(&i) {
            return Err(DspError::NotCola);
        }
        if den[i] > 0.0 {
            samples[i] = num[i] / den[i].max(floor);
        }
    }
    Ok(AudioBuffer::new(samples))
}

/// Elementwise complex modulus.
pub fn magnitude(spec: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        values: spec.values.mapv(|c| c.norm()),
        hop: spec.hop,
        window_len: spec.window_len,
        fft_size: spec.fft_size,
    }
}

/// Row normalization of the mel filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterNorm {
    /// Triangles peak at 1.
    #[default]
    None,
    /// Each row divided by its sum, so rows sum to 1.
    UnitSum,
}

/// Triangular mel filterbank on FFT bin centers, HTK mel scale
/// mel(f) = 2595 * log10(1 + f/700).
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// n_mels x bins weights.
    pub weights: Array2<f64>,
    /// Triangle peak frequencies in Hz, one per channel.
    pub center_freqs: Vec<f64>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(fft_size: usize, n_mels: usize, fmin: f64, fmax: f64, norm: FilterNorm) -> Result<Self> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(DspError::BadParams(format!(
                "mel range {fmin}..{fmax} Hz invalid for nyquist {nyquist}"
            )));
        }
        let bins = fft_size / 2 + 1;
        let mel_lo = hz_to_mel(fmin);
        let mel_hi = hz_to_mel(fmax);
        let hz_pts: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / fft_size as f64;

        let mut weights = Array2::<f64>::zeros((n_mels, bins));
        for m in 0..n_mels {
            let (lo, center, hi) = (hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f >= lo && f <= center && center > lo {
                    (f - lo) / (center - lo)
                } else if f > center && f <= hi && hi > center {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[(m, k)] = w;
            }
            if norm == FilterNorm::UnitSum {
                let s: f64 = weights.row(m).sum();
                if s > 0.0 {
                    weights.row_mut(m).mapv_inplace(|w| w / s);
                }
            }
        }
        Ok(Self {
            weights,
            center_freqs: hz_pts[1..=n_mels].to_vec(),
        })
    }
}

/// Log-mel energies: log(max(power . weights^T, floor)) where power is the
/// squared magnitude.
pub fn log_mel_fbank(mag: &MagnitudeSpectrogram, fb: &MelFilterbank) -> Result<FbankFeatures> {
    if fb.weights.ncols() != mag.bins() {
        return Err(DspError::BadParams(format!(
            "filterbank expects {} bins, magnitude has {}",
            fb.weights.ncols(),
            mag.bins()
        )));
    }
    let power = mag.values.mapv(|v| v * v);
    let mel = power.dot(&fb.weights.t());
    Ok(FbankFeatures {
        values: mel.mapv(|e| e.max(FBANK_FLOOR).ln()),
    })
}

/// Row indices that repeat each source frame `factor` times and then
/// truncate or edge-pad to exactly `target_frames` rows.
pub fn duplication_indices(frames: usize, factor: usize, target_frames: usize) -> Result<Vec<usize>> {
    if factor == 0 || frames == 0 {
        return Err(DspError::BadParams("factor and frames must be positive".into()));
    }
    let available = frames * factor;
    if target_frames > available + factor {
        return Err(DspError::AlignmentGap {
            target: target_frames,
            available,
            factor,
        });
    }
    Ok((0..target_frames)
        .map(|t| (t / factor).min(frames - 1))
        .collect())
}

/// Repeat each row `factor` times in order, truncated or edge-padded to
/// `target_frames` rows.
pub fn duplicate_frames(features: &Array2<f64>, factor: usize, target_frames: usize) -> Result<Array2<f64>> {
    let idx = duplication_indices(features.nrows(), factor, target_frames)?;
    let mut out = Array2::<f64>::zeros((target_frames, features.ncols()));
    for (t, &src) in idx.iter().enumerate() {
        out.row_mut(t).assign(&features.row(src));
    }
    Ok(out)
}

/// Mirror of [`duplicate_frames`]: keep every `factor`-th row, aligning
/// 10 ms feature frames to the lower SSL frame rate.
pub fn decimate_frames(features: &Array2<f64>, factor: usize) -> Array2<f64> {
    let rows: Vec<usize> = (0..features.nrows()).step_by(factor.max(1)).collect();
    let mut out = Array2::<f64>::zeros((rows.len(), features.ncols()));
    for (t, &src) in rows.iter().enumerate() {
        out.row_mut(t).assign(&features.row(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, amp: f64, seconds: f64) -> AudioBuffer {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
    }

    fn white_noise(n: usize, amp: f64, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..n).map(|_| amp * (rng.random::<f64>() * 2.0 - 1.0)).collect())
    }

    /// Independent O(n^2) DFT of one windowed frame.
    fn direct_dft_frame(samples: &[f64], window: &[f64], fft_size: usize) -> Vec<Complex64> {
        let bins = fft_size / 2 + 1;
        let mut out = Vec::with_capacity(bins);
        for k in 0..bins {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, (&x, &w)) in samples.iter().zip(window.iter()).enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / fft_size as f64;
                acc += Complex64::new(phase.cos(), phase.sin()) * (x * w);
            }
            out.push(acc);
        }
        out
    }

    #[test]
    fn zero_audio_produces_zero_spectrogram_with_expected_frames() {
        let audio = AudioBuffer::new(vec![0.0; 16000]);
        let spec = stft(&audio, StftConfig::default()).unwrap();
        assert_eq!(spec.frames(), 98);
        assert_eq!(spec.bins(), 257);
        assert!(spec.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sine_argmax_lands_on_expected_bin_and_matches_direct_dft() {
        let audio = sine(1000.0, 1.0, 1.0);
        let spec = stft(&audio, StftConfig::default()).unwrap();
        let expected_bin = (1000.0 * 512.0 / 16000.0_f64).round() as usize;
        assert_eq!(expected_bin, 32);
        for t in 0..spec.frames() {
            let row = spec.values.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 32, "frame {t}");
        }
        // Cross-check one frame against the direct DFT.
        let window = hann_window(400);
        let reference = direct_dft_frame(&audio.samples[480..880], &window, 512);
        for (k, r) in reference.iter().enumerate() {
            let got = spec.values[(3, k)];
            assert!((got - r).norm() < 1e-8, "bin {k}: {got} vs {r}");
        }
    }

    #[test]
    fn stft_rejects_short_and_non_finite_input() {
        let short = AudioBuffer::new(vec![0.0; 399]);
        assert!(matches!(
            stft(&short, StftConfig::default()),
            Err(DspError::TooShort { got: 399, need: 400 })
        ));
        let mut bad = sine(100.0, 0.5, 0.1);
        bad.samples[7] = f64::INFINITY;
        assert!(matches!(stft(&bad, StftConfig::default()), Err(DspError::NonFinite(7))));
    }

    #[test]
    fn istft_round_trip_reconstructs_interior() {
        let audio = white_noise(16000, 0.8, 7);
        let spec = stft(&audio, StftConfig::default()).unwrap();
        let back = istft(&spec).unwrap();
        let rms = (audio.samples.iter().map(|s| s * s).sum::<f64>() / audio.len() as f64).sqrt();
        let mut max_err: f64 = 0.0;
        for i in spec.interior_samples() {
            max_err = max_err.max((audio.samples[i] - back.samples[i]).abs());
        }
        assert!(max_err / rms < 1e-6, "interior err {max_err} rms {rms}");
    }

    #[test]
    fn istft_of_zero_spectrogram_is_silent() {
        let spec = ComplexSpectrogram {
            values: Array2::zeros((10, 257)),
            hop: 160,
            window_len: 400,
            fft_size: 512,
        };
        let audio = istft(&spec).unwrap();
        assert_eq!(audio.len(), 9 * 160 + 400);
        assert!(audio.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn second_round_trip_preserves_interior_magnitudes() {
        let audio = white_noise(12800, 0.5, 11);
        let spec1 = stft(&audio, StftConfig::default()).unwrap();
        let back = istft(&spec1).unwrap();
        let spec2 = stft(&back, StftConfig::default()).unwrap();
        let interior = spec1.interior_samples();
        for t in 0..spec1.frames().min(spec2.frames()) {
            let lo = t * 160;
            if lo < interior.start || lo + 400 > interior.end {
                continue;
            }
            for k in 0..spec1.bins() {
                let a = spec1.values[(t, k)].norm();
                let b = spec2.values[(t, k)].norm();
                assert!((a - b).abs() <= 1e-6 * a.max(1e-9), "frame {t} bin {k}");
            }
        }
    }

    #[test]
    fn stft_is_linear() {
        let a = white_noise(8000, 0.4, 1);
        let b = white_noise(8000, 0.3, 2);
        let sum = AudioBuffer::new(
            a.samples.iter().zip(b.samples.iter()).map(|(x, y)| x + y).collect(),
        );
        let cfg = StftConfig::default();
        let sa = stft(&a, cfg).unwrap();
        let sb = stft(&b, cfg).unwrap();
        let ss = stft(&sum, cfg).unwrap();
        for (i, v) in ss.values.iter().enumerate() {
            let w = sa.values.as_slice().unwrap()[i] + sb.values.as_slice().unwrap()[i];
            assert!((v - w).norm() <= 1e-9 * v.norm().max(1.0));
        }
    }

    #[test]
    fn windowed_frame_energy_matches_spectrum_energy() {
        // Parseval for the zero-padded real FFT.
        let audio = white_noise(4000, 0.7, 3);
        let cfg = StftConfig::default();
        let spec = stft(&audio, cfg).unwrap();
        let window = hann_window(cfg.window_len);
        for t in 0..spec.frames() {
            let start = t * cfg.hop;
            let time_energy: f64 = (0..cfg.window_len)
                .map(|i| (audio.samples[start + i] * window[i]).powi(2))
                .sum();
            let mut spec_energy = spec.values[(t, 0)].norm_sqr();
            for k in 1..cfg.bins() - 1 {
                spec_energy += 2.0 * spec.values[(t, k)].norm_sqr();
            }
            spec_energy += spec.values[(t, cfg.bins() - 1)].norm_sqr();
            spec_energy /= cfg.fft_size as f64;
            assert!(
                (time_energy - spec_energy).abs() <= 1e-6 * time_energy.max(1e-12),
                "frame {t}: {time_energy} vs {spec_energy}"
            );
        }
    }

    #[test]
    fn magnitude_is_complex_modulus() {
        let spec = ComplexSpectrogram {
            values: array![[Complex64::new(3.0, 4.0), Complex64::new(0.0, 0.0)]],
            hop: 160,
            window_len: 400,
            fft_size: 512,
        };
        let mag = magnitude(&spec);
        assert_eq!(mag.values[(0, 0)], 5.0);
        assert_eq!(mag.values[(0, 1)], 0.0);

        let audio = white_noise(2000, 0.6, 5);
        let spec = stft(&audio, StftConfig::default()).unwrap();
        let mag = magnitude(&spec);
        for (c, m) in spec.values.iter().zip(mag.values.iter()) {
            let direct = c.re * c.re + c.im * c.im;
            assert!((m * m - direct).abs() < 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn zero_magnitude_hits_log_floor() {
        let mag = MagnitudeSpectrogram {
            values: Array2::zeros((4, 257)),
            hop: 160,
            window_len: 400,
            fft_size: 512,
        };
        let fb = MelFilterbank::new(512, N_MELS, 0.0, 8000.0, FilterNorm::None).unwrap();
        let feats = log_mel_fbank(&mag, &fb).unwrap();
        assert_eq!(feats.values.ncols(), 80);
        for v in feats.values.iter() {
            assert_eq!(*v, FBANK_FLOOR.ln());
        }
    }

    #[test]
    fn filterbank_rows_are_positive_and_unit_sum_normalizes() {
        let plain = MelFilterbank::new(512, N_MELS, 0.0, 8000.0, FilterNorm::None).unwrap();
        for m in 0..N_MELS {
            assert!(plain.weights.row(m).sum() > 0.0, "row {m}");
        }
        let unit = MelFilterbank::new(512, N_MELS, 0.0, 8000.0, FilterNorm::UnitSum).unwrap();
        for m in 0..N_MELS {
            let s: f64 = unit.weights.row(m).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {m} sums to {s}");
        }
    }

    #[test]
    fn sine_at_filter_center_peaks_at_that_channel() {
        let fb = MelFilterbank::new(512, N_MELS, 0.0, 8000.0, FilterNorm::None).unwrap();
        for &k in &[30usize, 40, 55] {
            let audio = sine(fb.center_freqs[k], 0.8, 0.5);
            let spec = stft(&audio, StftConfig::default()).unwrap();
            let feats = log_mel_fbank(&magnitude(&spec), &fb).unwrap();
            let mid = feats.values.row(feats.frames() / 2);
            let argmax = mid
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k, "center {} Hz", fb.center_freqs[k]);
        }
    }

    #[test]
    fn log_mel_is_monotone_in_magnitude() {
        let audio = white_noise(4000, 0.5, 9);
        let spec = stft(&audio, StftConfig::default()).unwrap();
        let mag = magnitude(&spec);
        let scaled = MagnitudeSpectrogram {
            values: mag.values.mapv(|v| v * 1.7),
            ..mag.clone()
        };
        let fb = MelFilterbank::new(512, N_MELS, 0.0, 8000.0, FilterNorm::None).unwrap();
        let a = log_mel_fbank(&mag, &fb).unwrap();
        let b = log_mel_fbank(&scaled, &fb).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn duplicate_frames_repeats_truncates_and_pads() {
        let feats = array![[1.0], [2.0]];
        let out = duplicate_frames(&feats, 2, 4).unwrap();
        assert_eq!(out, array![[1.0], [1.0], [2.0], [2.0]]);
        let out = duplicate_frames(&feats, 2, 3).unwrap();
        assert_eq!(out, array![[1.0], [1.0], [2.0]]);
        let single = array![[5.0]];
        let out = duplicate_frames(&single, 2, 3).unwrap();
        assert_eq!(out, array![[5.0], [5.0], [5.0]]);
        assert!(matches!(
            duplicate_frames(&single, 2, 5),
            Err(DspError::AlignmentGap { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_identity_holds_for_random_buffers(seed in 0u64..500, len in 2048usize..8192) {
            let audio = white_noise(len, 0.9, seed);
            let spec = stft(&audio, StftConfig::default()).unwrap();
            let back = istft(&spec).unwrap();
            let rms = (audio.samples.iter().map(|s| s * s).sum::<f64>() / audio.len() as f64).sqrt();
            for i in spec.interior_samples() {
                proptest::prop_assert!((audio.samples[i] - back.samples[i]).abs() / rms < 1e-6);
            }
        }

        #[test]
        fn duplicated_rows_are_nondecreasing_source_rows(frames in 1usize..20, factor in 1usize..4, extra in 0usize..3) {
            let target = (frames * factor).saturating_sub(extra).max(1);
            let idx = duplication_indices(frames, factor, target).unwrap();
            proptest::prop_assert_eq!(idx.len(), target);
            for w in idx.windows(2) {
                proptest::prop_assert!(w[0] <= w[1]);
            }
            for &i in &idx {
                proptest::prop_assert!(i < frames);
            }
        }
    }
}
