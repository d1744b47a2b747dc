//! Line-oriented run configuration: `key = value` with `#` comments and
//! dotted namespaces. Every key has a documented default; unknown keys
//! are errors. The resolved config is serialized back into the run
//! directory and its FNV-1a hash is stamped into every artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dsp::StftConfig;
use crate::fnv1a64;
use crate::mixsim::ResourceCondition;
use crate::models::{BackboneConfig, CnnLayerSpec};
use crate::training::{FinetuneConfig, Objective, PretrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key: {0}")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`, got: {text}")]
    BadLine { line: usize, text: String },
    #[error("key {key}: cannot parse {value:?} as {want}")]
    BadValue {
        key: String,
        value: String,
        want: &'static str,
    },
    #[error("key {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// (key, default, documentation), the single source of truth for the
/// config surface.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("precision", "f64", "numeric precision: f64 (verification) or f32 (speed)"),
    ("workers", "1", "parallel workers for simulation and evaluation"),
    ("dsp.window_len", "400", "STFT window length in samples (25 ms)"),
    ("dsp.hop", "160", "STFT hop in samples (10 ms)"),
    ("dsp.fft_size", "512", "FFT size; bins = fft_size/2 + 1"),
    ("dsp.n_mels", "80", "mel filterbank channels"),
    ("dsp.fmin", "0.0", "mel filterbank lower edge in Hz"),
    ("dsp.fmax", "8000.0", "mel filterbank upper edge in Hz"),
    ("data.speech_manifest", "", "path to a speech manifest (empty: synthesize)"),
    ("data.noise_manifest", "", "path to a noise manifest (empty: synthesize)"),
    ("data.synth_speech_clips", "6", "synthetic speech clips when no manifest is given"),
    ("data.synth_noise_clips", "4", "synthetic noise clips when no manifest is given"),
    ("data.synth_clip_seconds", "1.0", "synthetic clip duration in seconds"),
    ("data.synth_seed", "7", "seed of the synthetic corpus generator"),
    ("simulate.count", "20", "noisy/clean pairs to simulate"),
    ("simulate.seed", "11", "seed of the mixture simulator"),
    ("subset.seed", "5", "seed of the resource-condition subsetter"),
    ("condition.speech_hours", "", "speech hours limit (empty: full resource)"),
    ("condition.noise_fraction", "", "noise subset fraction in (0,1] (empty: full)"),
    ("model.cnn_layers", "64x16x8,64x40x40", "CNN chain as out_channels x kernel x stride, comma separated"),
    ("model.dim", "64", "transformer model width"),
    ("model.blocks", "3", "transformer block count"),
    ("model.heads", "4", "attention heads"),
    ("model.ffn_dim", "128", "feed-forward hidden width"),
    ("model.rel_pos_buckets", "32", "relative position buckets"),
    ("model.rel_pos_max_distance", "64", "relative position clipping distance"),
    ("model.rel_pos_enabled", "true", "enable the gated relative position bias"),
    ("pretrain.objective", "regression", "pre-training objective: classification or regression"),
    ("pretrain.noise_mixing", "false", "mix noise into pre-training inputs"),
    ("pretrain.p_mix", "0.1", "per-utterance mixing probability"),
    ("pretrain.steps", "200", "pre-training steps (one utterance per step)"),
    ("pretrain.lr", "5e-4", "peak learning rate"),
    ("pretrain.warmup_frac", "0.1", "fraction of steps spent warming up"),
    ("pretrain.grad_clip", "5.0", "global gradient norm clip"),
    ("pretrain.seed", "1", "pre-training seed"),
    ("pretrain.mask_p", "0.065", "mask span start probability"),
    ("pretrain.mask_l", "10", "mask span length in SSL frames"),
    ("pretrain.quantizer_classes", "64", "k-means classes of the discrete targets"),
    ("pretrain.quantizer_iters", "10", "k-means Lloyd iterations"),
    ("pretrain.quantizer_max_frames", "4000", "frame budget for codebook estimation"),
    ("pretrain.proj_dim", "64", "classification projection/embedding width"),
    ("pretrain.codebook", "", "load a quantize-targets checkpoint instead of clustering"),
    ("finetune.backbone_checkpoint", "", "pre-trained backbone (empty: baseline head only)"),
    ("finetune.freeze_backbone", "true", "keep the backbone frozen during fine-tuning"),
    ("finetune.head_layers", "2", "bi-directional recurrent layers"),
    ("finetune.head_hidden", "128", "recurrent hidden units per direction"),
    ("finetune.steps", "500", "fine-tuning steps"),
    ("finetune.lr", "1e-3", "peak learning rate"),
    ("finetune.warmup_frac", "0.1", "fraction of steps spent warming up"),
    ("finetune.grad_clip", "5.0", "global gradient norm clip"),
    ("finetune.seed", "2", "fine-tuning seed"),
    ("finetune.restoration_exponent", "1.0", "magnitude compression exponent of the loss"),
    ("finetune.pairs", "", "paired manifest for fine-tuning (pairs.tsv)"),
    ("evaluate.pairs", "", "paired manifest to evaluate"),
    ("evaluate.checkpoint", "", "fine-tuned model checkpoint (mode = model)"),
    ("evaluate.mode", "model", "mask source: model, oracle or identity"),
    ("enhance.checkpoint", "", "fine-tuned model checkpoint for enhancement"),
    ("reproduce.pretrain_steps", "60", "pre-training steps per condition variant"),
    ("reproduce.finetune_steps", "120", "fine-tuning steps per condition variant"),
    ("reproduce.train_pairs", "8", "simulated training pairs"),
    ("reproduce.eval_pairs", "6", "held-out evaluation pairs"),
    ("reproduce.speech_fraction", "0.4", "speech-hours fraction of the low-speech condition"),
    ("reproduce.noise_fraction", "0.34", "noise fraction of the low-noise condition"),
    ("reproduce.seed", "3", "seed of the condition harness"),
];

/// Numeric precision of training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Fully resolved configuration: defaults overlaid with a config file and
/// command-line overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: CONFIG_KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::default();
        cfg.merge_text(&text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not in the key table"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, want: &'static str) -> Result<T> {
        self.get(key).parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: self.get(key).to_string(),
            want,
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "unsigned integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "unsigned integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse(key, "real number")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: other.to_string(),
                want: "bool",
            }),
        }
    }

    /// Empty string means unset.
    pub fn get_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            Ok(Some(self.get_f64(key)?))
        }
    }

    pub fn get_opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        if v.is_empty() {
            None
        } else {
            Some(PathBuf::from(v))
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.get("precision") {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(ConfigError::BadValue {
                key: "precision".into(),
                value: other.into(),
                want: "f32 or f64",
            }),
        }
    }

    /// Sorted `key = value` lines; what gets written to the run directory
    /// and hashed.
    pub fn serialized(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.serialized().as_bytes())
    }

    /// Hash over the DSP-affecting keys only; reports carry it so
    /// cross-configuration comparisons can be refused.
    pub fn dsp_hash(&self) -> u64 {
        let mut out = String::new();
        for key in [
            "dsp.window_len",
            "dsp.hop",
            "dsp.fft_size",
            "dsp.n_mels",
            "dsp.fmin",
            "dsp.fmax",
        ] {
            writeln!(out, "{key} = {}", self.get(key)).expect("string write");
        }
        fnv1a64(out.as_bytes())
    }

    pub fn stft(&self) -> Result<StftConfig> {
        Ok(StftConfig {
            window_len: self.get_usize("dsp.window_len")?,
            hop: self.get_usize("dsp.hop")?,
            fft_size: self.get_usize("dsp.fft_size")?,
        })
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let mut layers = Vec::new();
        for part in self.get("model.cnn_layers").split(',') {
            let fields: Vec<&str> = part.trim().split('x').collect();
            if fields.len() != 3 {
                return Err(ConfigError::Invalid {
                    key: "model.cnn_layers".into(),
                    reason: format!("layer {part:?} is not out x kernel x stride"),
                });
            }
            let num = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| ConfigError::BadValue {
                    key: "model.cnn_layers".into(),
                    value: s.to_string(),
                    want: "unsigned integer",
                })
            };
            layers.push(CnnLayerSpec {
                out_channels: num(fields[0])?,
                kernel: num(fields[1])?,
                stride: num(fields[2])?,
            });
        }
        Ok(BackboneConfig {
            cnn_layers: layers,
            model_dim: self.get_usize("model.dim")?,
            num_blocks: self.get_usize("model.blocks")?,
            num_heads: self.get_usize("model.heads")?,
            ffn_dim: self.get_usize("model.ffn_dim")?,
            rel_pos_buckets: self.get_usize("model.rel_pos_buckets")?,
            rel_pos_max_distance: self.get_usize("model.rel_pos_max_distance")?,
            rel_pos_enabled: self.get_bool("model.rel_pos_enabled")?,
        })
    }

    pub fn resource_condition(&self) -> Result<ResourceCondition> {
        Ok(ResourceCondition {
            speech_hours_limit: self.get_opt_f64("condition.speech_hours")?,
            noise_fraction: self.get_opt_f64("condition.noise_fraction")?,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let objective = match self.get("pretrain.objective") {
            "classification" => Objective::Classification,
            "regression" => Objective::Regression,
            other => {
                return Err(ConfigError::BadValue {
                    key: "pretrain.objective".into(),
                    value: other.into(),
                    want: "classification or regression",
                })
            }
        };
        Ok(PretrainConfig {
            objective,
            noise_mixing: self.get_bool("pretrain.noise_mixing")?,
            p_mix: self.get_f64("pretrain.p_mix")?,
            steps: self.get_usize("pretrain.steps")?,
            peak_lr: self.get_f64("pretrain.lr")?,
            warmup_frac: self.get_f64("pretrain.warmup_frac")?,
            grad_clip: self.get_f64("pretrain.grad_clip")?,
            seed: self.get_u64("pretrain.seed")?,
            mask_start_prob: self.get_f64("pretrain.mask_p")?,
            mask_span_len: self.get_usize("pretrain.mask_l")?,
            quantizer_classes: self.get_usize("pretrain.quantizer_classes")?,
            quantizer_iters: self.get_usize("pretrain.quantizer_iters")?,
            quantizer_max_frames: self.get_usize("pretrain.quantizer_max_frames")?,
            backbone: self.backbone()?,
            stft: self.stft()?,
            proj_dim: self.get_usize("pretrain.proj_dim")?,
            codebook: self.get_opt_path("pretrain.codebook"),
            config_hash: self.hash(),
        })
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            backbone_checkpoint: self.get_opt_path("finetune.backbone_checkpoint"),
            freeze_backbone: self.get_bool("finetune.freeze_backbone")?,
            head_layers: self.get_usize("finetune.head_layers")?,
            head_hidden: self.get_usize("finetune.head_hidden")?,
            steps: self.get_usize("finetune.steps")?,
            peak_lr: self.get_f64("finetune.lr")?,
            warmup_frac: self.get_f64("finetune.warmup_frac")?,
            grad_clip: self.get_f64("finetune.grad_clip")?,
            seed: self.get_u64("finetune.seed")?,
            stft: self.stft()?,
            restoration_exponent: self.get_f64("finetune.restoration_exponent")?,
            config_hash: self.hash(),
        })
    }
}

/// Render the key table as a commented reference config.
pub fn reference_config() -> String {
    let mut out = String::from("# configuration reference: key = default\n");
    for (k, d, doc) in CONFIG_KEYS {
        writeln!(out, "# {doc}\n{k} = {d}").expect("string write");
    }
    out
}
