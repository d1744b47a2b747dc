//! Mono waveform buffers and the WAV subset the pipeline reads and writes.
//!
//! Files are RIFF WAV, mono, 16 kHz. Writing always produces 16-bit signed
//! PCM; reading additionally accepts 32-bit IEEE float. Integer samples map
//! to [-1, 1) by dividing by 32768 on read; writing clamps to [-1, 1],
//! scales by 32768 and saturates to the i16 range.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::SAMPLE_RATE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("utterance too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("unsupported sample rate {0} Hz, pipeline is fixed at 16000 Hz")]
    BadSampleRate(u32),
    #[error("{path}: not a RIFF/WAVE file")]
    NotWav { path: String },
    #[error("{path}: unsupported WAV layout: {reason}")]
    UnsupportedWav { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono waveform at the fixed pipeline sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Errors if any sample is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(AudioError::NonFinite(i));
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> AudioError {
    AudioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Read a mono 16 kHz WAV file (16-bit PCM or 32-bit float).
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let pathstr = path.display().to_string();
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav { path: pathstr });
    }
    let unsupported = |reason: &str| AudioError::UnsupportedWav {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };

    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(unsupported("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(unsupported("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| unsupported("missing fmt chunk"))?;
    let (off, len) = data.ok_or_else(|| unsupported("missing data chunk"))?;
    if channels != 1 {
        return Err(unsupported(&format!("{channels} channels, want mono")));
    }
    if rate != SAMPLE_RATE {
        return Err(AudioError::BadSampleRate(rate));
    }

    let samples = match (format, bits) {
        (1, 16) => bytes[off..off + len]
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => bytes[off..off + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(unsupported(&format!(
                "format tag {format} with {bits} bits, want 16-bit PCM or 32-bit float"
            )))
        }
    };
    let buf = AudioBuffer::new(samples);
    buf.check_finite()?;
    Ok(buf)
}

/// Write a mono 16 kHz 16-bit PCM WAV file.
///
/// Samples are clamped to [-1, 1], scaled by 32768 and saturated to the
/// i16 range, so +1.0 maps to 32767 and -1.0 to -32768.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    audio.check_finite()?;
    if audio.sample_rate != SAMPLE_RATE {
        return Err(AudioError::BadSampleRate(audio.sample_rate));
    }
    let n = audio.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round();
        let q = v.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1600)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        let buf = AudioBuffer::new(samples.clone());
        write_wav(&path, &buf).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn write_clamps_out_of_range_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let buf = AudioBuffer::new(vec![2.0, -2.0, 1.0, -1.0]);
        write_wav(&path, &buf).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
        assert_eq!(back.samples[1], -1.0);
        assert_eq!(back.samples[2], 32767.0 / 32768.0);
        assert_eq!(back.samples[3], -1.0);
    }

    #[test]
    fn write_rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let buf = AudioBuffer::new(vec![0.0, f64::NAN]);
        assert!(matches!(
            write_wav(&dir.path().join("n.wav"), &buf),
            Err(AudioError::NonFinite(1))
        ));
    }

    #[test]
    fn read_rejects_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let buf = AudioBuffer::new(vec![0.0; 16]);
        write_wav(&path, &buf).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[24..28].copy_from_slice(&8000u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(AudioError::BadSampleRate(8000))));
    }

    #[test]
    fn float32_wav_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let samples: Vec<f32> = vec![0.25, -0.5, 0.125];
        let mut out = Vec::new();
        let data_len = (samples.len() * 4) as u32;
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * 4).to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&32u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for s in &samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        fs::write(&path, &out).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples, vec![0.25, -0.5, 0.125]);
    }
}
