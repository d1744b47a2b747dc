//! SDR computation, the oracle magnitude mask baseline, full-utterance
//! enhancement (mask -> reconstruct with noisy phase), and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use ndarray::Array2;
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError};
use crate::dsp::{self, ComplexSpectrogram, DspError, MagnitudeSpectrogram, StftConfig};
use crate::mixsim::PairedManifest;
use crate::tensor::Real;
use crate::training::{EnhancementModel, TrainError};

/// SDR values above this are reported as the cap (the error energy has
/// underflowed).
pub const SDR_CAP_DB: f64 = 100.0;
const ORACLE_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("zero reference energy")]
    ZeroReference,
    #[error("oracle enhancement requires the clean signal")]
    OracleNeedsClean,
    #[error("pair {pair_id}: {source}")]
    PairAudio {
        pair_id: String,
        #[source]
        source: AudioError,
    },
    #[error("shape mismatch: clean {clean:?}, noisy {noisy:?}")]
    ShapeMismatch {
        clean: Vec<usize>,
        noisy: Vec<usize>,
    },
    #[error("bad report file {path}: {reason}")]
    BadReport { path: String, reason: String },
    #[error("reports compare different dsp configurations: {a:#x} vs {b:#x}")]
    DspHashMismatch { a: u64, b: u64 },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Plain energy-ratio SDR in dB: 10 log10(sum ref^2 / sum (ref - est)^2),
/// capped at +100 dB. Lengths are trimmed to the shorter signal; a
/// mismatch beyond one hop is logged.
pub fn sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    if reference.len().abs_diff(estimate.len()) > dsp::DEFAULT_HOP {
        log::warn!(
            "sdr length mismatch: reference {} vs estimate {}",
            reference.len(),
            estimate.len()
        );
    }
    let mut ref_energy = 0.0;
    let mut err_energy = 0.0;
    for i in 0..n {
        let r = reference.samples[i];
        let e = estimate.samples[i];
        ref_energy += r * r;
        err_energy += (r - e) * (r - e);
    }
    if ref_energy <= 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    if err_energy <= 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (ref_energy / err_energy).log10()).min(SDR_CAP_DB))
}

/// Scale-invariant SDR: the estimate is first projected onto the
/// reference. Provided as a separate, clearly labeled column.
pub fn si_sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    let mut dot = 0.0;
    let mut ref_energy = 0.0;
    for i in 0..n {
        dot += reference.samples[i] * estimate.samples[i];
        ref_energy += reference.samples[i] * reference.samples[i];
    }
    if ref_energy <= 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let alpha = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut err_energy = 0.0;
    for i in 0..n {
        let t = alpha * reference.samples[i];
        target_energy += t * t;
        let e = estimate.samples[i] - t;
        err_energy += e * e;
    }
    if err_energy <= 0.0 || target_energy <= 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / err_energy).log10()).min(SDR_CAP_DB))
}

/// mask = clamp(clean / max(noisy, eps), 0, 1): the upper bound a
/// sigmoid-output head can reach.
pub fn oracle_magnitude_mask(
    clean_mag: &MagnitudeSpectrogram,
    noisy_mag: &MagnitudeSpectrogram,
) -> Result<Array2<f64>> {
    if clean_mag.values.shape() != noisy_mag.values.shape() {
        return Err(MetricsError::ShapeMismatch {
            clean: clean_mag.values.shape().to_vec(),
            noisy: noisy_mag.values.shape().to_vec(),
        });
    }
    Ok(ndarray::Zip::from(&clean_mag.values)
        .and(&noisy_mag.values)
        .map_collect(|&c, &n| (c / n.max(ORACLE_EPS)).clamp(0.0, 1.0)))
}

/// Mean per-cell restoration loss of a mask against magnitudes.
pub fn restoration_loss_value(
    mask: &Array2<f64>,
    noisy_mag: &MagnitudeSpectrogram,
    clean_mag: &MagnitudeSpectrogram,
) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    ndarray::Zip::from(mask)
        .and(&noisy_mag.values)
        .and(&clean_mag.values)
        .for_each(|&m, &n, &c| {
            let d = m * n - c;
            acc += d * d;
            count += 1;
        });
    acc / count.max(1) as f64
}

/// est_mag = mask * noisy_mag, reconstructed with the noisy phase.
pub fn apply_mask_and_reconstruct(
    noisy_spec: &ComplexSpectrogram,
    mask: &Array2<f64>,
) -> Result<AudioBuffer> {
    if noisy_spec.values.shape() != mask.shape() {
        return Err(MetricsError::ShapeMismatch {
            clean: mask.shape().to_vec(),
            noisy: noisy_spec.values.shape().to_vec(),
        });
    }
    let masked = ComplexSpectrogram {
        values: ndarray::Zip::from(&noisy_spec.values)
            .and(mask)
            .map_collect(|&z, &m| z * m),
        hop: noisy_spec.hop,
        window_len: noisy_spec.window_len,
        fft_size: noisy_spec.fft_size,
    };
    Ok(dsp::istft(&masked)?)
}

/// Where the magnitude mask comes from.
pub enum MaskSource<'a, T: Real> {
    Model(&'a EnhancementModel<T>),
    Oracle,
    Identity,
}

impl<T: Real> MaskSource<'_, T> {
    pub fn label(&self) -> &'static str {
        match self {
            MaskSource::Model(_) => "model",
            MaskSource::Oracle => "oracle",
            MaskSource::Identity => "identity",
        }
    }
}

/// Enhance one utterance: predict or derive a mask, apply it to the noisy
/// magnitude, reconstruct with the noisy phase, trim to the analyzed
/// length.
pub fn enhance_utterance<T: Real>(
    source: &MaskSource<'_, T>,
    noisy: &AudioBuffer,
    clean: Option<&AudioBuffer>,
    stft_cfg: StftConfig,
) -> Result<AudioBuffer> {
    let noisy_spec = dsp::stft(noisy, stft_cfg)?;
    let mask = match source {
        MaskSource::Identity => Array2::from_elem(
            (noisy_spec.frames(), noisy_spec.bins()),
            1.0,
        ),
        MaskSource::Oracle => {
            let clean = clean.ok_or(MetricsError::OracleNeedsClean)?;
            let clean_spec = dsp::stft(clean, stft_cfg)?;
            oracle_magnitude_mask(&dsp::magnitude(&clean_spec), &dsp::magnitude(&noisy_spec))?
        }
        MaskSource::Model(model) => model.predict_mask(noisy).map_err(Box::new)?,
    };
    apply_mask_and_reconstruct(&noisy_spec, &mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub pair_id: String,
    pub sdr_noisy: f64,
    pub sdr_enhanced: f64,
    pub sdr_oracle: f64,
    pub si_sdr_enhanced: f64,
    pub restoration_loss: f64,
}

/// Per-utterance rows plus aggregate means and the run's config hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub mean_sdr_noisy: f64,
    pub mean_sdr_enhanced: f64,
    pub mean_sdr_oracle: f64,
    pub mean_si_sdr_enhanced: f64,
    pub mean_restoration_loss: f64,
    pub config_hash: u64,
    pub dsp_hash: u64,
}

impl MetricsReport {
    fn from_rows(rows: Vec<ReportRow>, config_hash: u64, dsp_hash: u64) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mean_sdr_noisy: mean(|r| r.sdr_noisy),
            mean_sdr_enhanced: mean(|r| r.sdr_enhanced),
            mean_sdr_oracle: mean(|r| r.sdr_oracle),
            mean_si_sdr_enhanced: mean(|r| r.si_sdr_enhanced),
            mean_restoration_loss: mean(|r| r.restoration_loss),
            rows,
            config_hash,
            dsp_hash,
        }
    }

    /// Header line, TAB rows, `#AGG` aggregate block, `#CFG` hashes.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "pair_id\tsdr_noisy_db\tsdr_enhanced_db\tsdr_oracle_db\tsi_sdr_enhanced_db\trestoration_loss\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.9e}",
                r.pair_id, r.sdr_noisy, r.sdr_enhanced, r.sdr_oracle, r.si_sdr_enhanced, r.restoration_loss
            )
            .expect("string write");
        }
        writeln!(
            out,
            "#AGG\tmean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.9e}",
            self.mean_sdr_noisy,
            self.mean_sdr_enhanced,
            self.mean_sdr_oracle,
            self.mean_si_sdr_enhanced,
            self.mean_restoration_loss
        )
        .expect("string write");
        writeln!(out, "#CFG\t{:016x}\t{:016x}", self.config_hash, self.dsp_hash).expect("string write");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| MetricsError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MetricsError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let bad = |reason: &str| MetricsError::BadReport {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut rows = Vec::new();
        let mut config_hash = 0u64;
        let mut dsp_hash = 0u64;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if line.starts_with("#CFG") {
                if f.len() != 3 {
                    return Err(bad("#CFG needs 2 hashes"));
                }
                config_hash =
                    u64::from_str_radix(f[1], 16).map_err(|_| bad("bad config hash"))?;
                dsp_hash = u64::from_str_radix(f[2], 16).map_err(|_| bad("bad dsp hash"))?;
                continue;
            }
            if line.starts_with("#AGG") {
                continue;
            }
            if f.len() != 6 {
                return Err(bad(&format!("row {} has {} fields", i + 1, f.len())));
            }
            let p = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| MetricsError::BadReport {
                    path: path.display().to_string(),
                    reason: format!("bad number {s}"),
                })
            };
            rows.push(ReportRow {
                pair_id: f[0].to_string(),
                sdr_noisy: p(f[1])?,
                sdr_enhanced: p(f[2])?,
                sdr_oracle: p(f[3])?,
                si_sdr_enhanced: p(f[4])?,
                restoration_loss: p(f[5])?,
            });
        }
        Ok(Self::from_rows(rows, config_hash, dsp_hash))
    }
}

/// Refuse to compare reports produced under different DSP configurations.
pub fn guard_same_dsp(a: &MetricsReport, b: &MetricsReport) -> Result<()> {
    if a.dsp_hash != b.dsp_hash {
        return Err(MetricsError::DspHashMismatch {
            a: a.dsp_hash,
            b: b.dsp_hash,
        });
    }
    Ok(())
}

/// Evaluate a mask source over every pair in the manifest. SDRs are
/// computed over the common reconstructed length, so the identity mask
/// scores the same as the raw noisy input up to round-trip error.
pub fn evaluate<T: Real>(
    pairs: &PairedManifest,
    source: &MaskSource<'_, T>,
    stft_cfg: StftConfig,
    config_hash: u64,
    dsp_hash: u64,
    workers: usize,
) -> Result<MetricsReport> {
    let rows: Mutex<Vec<Option<ReportRow>>> = Mutex::new(vec![None; pairs.pairs.len()]);
    let failure: Mutex<Option<MetricsError>> = Mutex::new(None);

    let eval_one = |k: usize| -> Result<()> {
        let pair = &pairs.pairs[k];
        let with_pair = |e: AudioError| MetricsError::PairAudio {
            pair_id: pair.pair_id.clone(),
            source: e,
        };
        let noisy = audio::read_wav(&pairs.resolve_noisy(pair)).map_err(with_pair)?;
        let clean = audio::read_wav(&pairs.resolve_clean(pair)).map_err(with_pair)?;

        let noisy_spec = dsp::stft(&noisy, stft_cfg)?;
        let clean_spec = dsp::stft(&clean, stft_cfg)?;
        let noisy_mag = dsp::magnitude(&noisy_spec);
        let clean_mag = dsp::magnitude(&clean_spec);

        let mask = match source {
            MaskSource::Identity => Array2::from_elem((noisy_spec.frames(), noisy_spec.bins()), 1.0),
            MaskSource::Oracle => oracle_magnitude_mask(&clean_mag, &noisy_mag)?,
            MaskSource::Model(model) => model.predict_mask(&noisy).map_err(Box::new)?,
        };
        let enhanced = apply_mask_and_reconstruct(&noisy_spec, &mask)?;
        let oracle_mask = oracle_magnitude_mask(&clean_mag, &noisy_mag)?;
        let oracle_est = apply_mask_and_reconstruct(&noisy_spec, &oracle_mask)?;

        // Score over the fully-covered interior, where reconstruction is
        // exact; window edges are best-effort by construction.
        let len = enhanced.len();
        let range = {
            let r = noisy_spec.interior_samples();
            if r.is_empty() {
                0..len
            } else {
                r
            }
        };
        let trim = |b: &AudioBuffer| {
            AudioBuffer::new(b.samples[range.start.min(b.len())..range.end.min(b.len())].to_vec())
        };
        let clean_t = trim(&clean);
        let noisy_t = trim(&noisy);
        let enhanced = trim(&enhanced);
        let oracle_est = trim(&oracle_est);

        let row = ReportRow {
            pair_id: pair.pair_id.clone(),
            sdr_noisy: sdr(&clean_t, &noisy_t)?,
            sdr_enhanced: sdr(&clean_t, &enhanced)?,
            sdr_oracle: sdr(&clean_t, &oracle_est)?,
            si_sdr_enhanced: si_sdr(&clean_t, &enhanced)?,
            restoration_loss: restoration_loss_value(&mask, &noisy_mag, &clean_mag),
        };
        rows.lock().unwrap()[k] = Some(row);
        Ok(())
    };

    let workers = workers.max(1).min(pairs.pairs.len().max(1));
    if workers <= 1 {
        for k in 0..pairs.pairs.len() {
            eval_one(k)?;
        }
    } else {
        std::thread::scope(|scope| {
            for w in 0..workers {
                let eval_one = &eval_one;
                let failure = &failure;
                scope.spawn(move || {
                    for k in (w..pairs.pairs.len()).step_by(workers) {
                        if let Err(e) = eval_one(k) {
                            *failure.lock().unwrap() = Some(e);
                            return;
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
    }

    let rows: Vec<ReportRow> = rows
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("all pairs evaluated"))
        .collect();
    Ok(MetricsReport::from_rows(rows, config_hash, dsp_hash))
}
