//! Seeded pre-training and fine-tuning loops with loss logs and
//! checkpoint persistence.
//!
//! Both loops are deterministic given their configs and seeds: every
//! per-step random draw comes from a ChaCha stream derived from
//! (seed, step), utterances are cached after first read, and the
//! optimizer is single-threaded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dsp::{self, DspError, MelFilterbank, StftConfig};
use crate::mixsim::{self, DatasetManifest, MixError, PairedManifest};
use crate::models::{
    enhancement_forward, Backbone, BackboneConfig, BindMode, CnnLayerSpec, EnhancementHead,
    EnhancementHeadConfig, ModelError,
};
use crate::objectives::{
    self, assign, classification_loss, gen_mask_spans_nonempty, regression_loss,
    signal_restoration_loss, ClassificationHead, ObjectiveError, QuantizerCodebook, RegressionHead,
};
use crate::tensor::{
    array_from_f64, array_to_f64, AdamConfig, AdamState, clip_global_norm, GradBuffer, Graph,
    ParamStore, Real, TensorError,
};
use crate::{derive_seed, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("bad training configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint stft {ckpt:?} does not match configured {cfg:?}")]
    DspMismatch { ckpt: StftConfig, cfg: StftConfig },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Linear warmup to the peak, then linear decay toward zero at the end.
pub fn lr_at(step: usize, steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    let warmup = ((steps as f64 * warmup_frac).round() as usize).max(1);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let denom = (steps - warmup).max(1) as f64;
        peak * (steps - step) as f64 / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Classification,
    Regression,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub noise_mixing: bool,
    pub p_mix: f64,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mask_start_prob: f64,
    pub mask_span_len: usize,
    pub quantizer_classes: usize,
    pub quantizer_iters: usize,
    pub quantizer_max_frames: usize,
    pub backbone: BackboneConfig,
    pub stft: StftConfig,
    /// Projection/embedding width of the classification head.
    pub proj_dim: usize,
    /// Load a pre-built codebook container instead of clustering.
    pub codebook: Option<PathBuf>,
    /// Hash of the resolved run configuration, stamped into artifacts.
    pub config_hash: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Regression,
            noise_mixing: false,
            p_mix: 0.1,
            steps: 200,
            peak_lr: 5e-4,
            warmup_frac: 0.1,
            grad_clip: 5.0,
            seed: 0,
            mask_start_prob: objectives::DEFAULT_MASK_START_PROB,
            mask_span_len: objectives::DEFAULT_MASK_SPAN_LEN,
            quantizer_classes: 64,
            quantizer_iters: 10,
            quantizer_max_frames: 4000,
            backbone: BackboneConfig::default(),
            stft: StftConfig::default(),
            proj_dim: 64,
            codebook: None,
            config_hash: 0,
        }
    }
}

impl PretrainConfig {
    /// STFT frames per SSL frame; the duplication/decimation factor.
    pub fn frame_factor(&self) -> Result<usize> {
        let total = self.backbone.total_stride();
        if total % self.stft.hop != 0 {
            return Err(TrainError::BadConfig(format!(
                "CNN total stride {} is not a multiple of the STFT hop {}",
                total, self.stft.hop
            )));
        }
        Ok(total / self.stft.hop)
    }
}

#[derive(Debug)]
pub struct PretrainResult {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub losses: Vec<f64>,
    /// How many steps actually invoked the noise mixer.
    pub mix_count: usize,
    pub accessed_clips: BTreeSet<String>,
}

struct WavCache {
    cache: BTreeMap<String, AudioBuffer>,
}

impl WavCache {
    fn new() -> Self {
        Self {
            cache: BTreeMap::new(),
        }
    }

    fn get(&mut self, manifest: &DatasetManifest, clip_id: &str) -> Result<AudioBuffer> {
        if let Some(b) = self.cache.get(clip_id) {
            return Ok(b.clone());
        }
        let entry = manifest
            .find(clip_id)
            .ok_or_else(|| TrainError::BadConfig(format!("clip {clip_id} not in manifest")))?;
        let buf = audio::read_wav(&manifest.resolve(entry))?;
        self.cache.insert(clip_id.to_string(), buf.clone());
        Ok(buf)
    }
}

/// Log-mel of a waveform, decimated to the SSL frame rate.
fn ssl_rate_fbank(
    wave: &AudioBuffer,
    stft_cfg: StftConfig,
    fb: &MelFilterbank,
    factor: usize,
) -> Result<Array2<f64>> {
    let spec = dsp::stft(wave, stft_cfg)?;
    let mag = dsp::magnitude(&spec);
    let feats = dsp::log_mel_fbank(&mag, fb)?;
    Ok(dsp::decimate_frames(&feats.values, factor))
}

/// Build the discrete-target codebook from clean manifests.
fn build_codebook(
    cfg: &PretrainConfig,
    speech: &DatasetManifest,
    fb: &MelFilterbank,
    cache: &mut WavCache,
) -> Result<QuantizerCodebook> {
    let factor = cfg.frame_factor()?;
    let mut frames: Vec<Array2<f64>> = Vec::new();
    let mut total = 0usize;
    for entry in &speech.entries {
        if total >= cfg.quantizer_max_frames {
            break;
        }
        let wave = cache.get(speech, &entry.clip_id)?;
        let feats = ssl_rate_fbank(&wave, cfg.stft, fb, factor)?;
        total += feats.nrows();
        frames.push(feats);
    }
    let dim = frames.first().map(|f| f.ncols()).unwrap_or(dsp::N_MELS);
    let mut all = Array2::<f64>::zeros((frames.iter().map(|f| f.nrows()).sum(), dim));
    let mut row = 0;
    for f in &frames {
        for r in 0..f.nrows() {
            all.row_mut(row).assign(&f.row(r));
            row += 1;
        }
    }
    let n = all.nrows().min(cfg.quantizer_max_frames);
    let all = all.slice_move(ndarray::s![..n, ..]);
    let run = objectives::kmeans_quantize(
        &all,
        cfg.quantizer_classes,
        cfg.quantizer_iters,
        derive_seed(cfg.seed, 0xC0DE),
    )?;
    Ok(run.codebook)
}

/// Read a codebook stored under `quantizer.*` names.
pub fn codebook_from_checkpoint(ckpt: &Checkpoint) -> Result<QuantizerCodebook> {
    let centroids = ckpt
        .get("quantizer.centroids")
        .ok_or_else(|| CheckpointError::MissingTensor("quantizer.centroids".into()))?
        .to_real::<f64>()?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| TrainError::BadConfig("quantizer.centroids must be 2-d".into()))?;
    Ok(QuantizerCodebook { centroids })
}

/// Build the discrete-target codebook from a speech manifest and persist
/// it as a checkpoint container with `quantizer.*` tensors.
pub fn quantize_targets(
    cfg: &PretrainConfig,
    speech: &DatasetManifest,
    out_path: &Path,
) -> Result<QuantizerCodebook> {
    let fb = MelFilterbank::new(
        cfg.stft.fft_size,
        dsp::N_MELS,
        0.0,
        SAMPLE_RATE as f64 / 2.0,
        dsp::FilterNorm::default(),
    )?;
    let mut cache = WavCache::new();
    let codebook = build_codebook(cfg, speech, &fb, &mut cache)?;
    let mut ckpt = Checkpoint::new();
    ckpt.push_real::<f64>("quantizer.centroids", &codebook.centroids.clone().into_dyn())?;
    ckpt.push_i64_scalar("quantizer.C", codebook.classes() as i64)?;
    ckpt.push_i64(
        "meta.stft",
        vec![3],
        vec![
            cfg.stft.window_len as i64,
            cfg.stft.hop as i64,
            cfg.stft.fft_size as i64,
        ],
    )?;
    ckpt.push_i64_scalar("meta.seed", cfg.seed as i64)?;
    ckpt.push_i64_scalar("meta.config_hash", cfg.config_hash as i64)?;
    ckpt.save(out_path)?;
    Ok(codebook)
}

fn meta_from_backbone(ckpt: &mut Checkpoint, cfg: &BackboneConfig, stft: StftConfig) {
    let cnn: Vec<i64> = cfg
        .cnn_layers
        .iter()
        .flat_map(|l| [l.out_channels as i64, l.kernel as i64, l.stride as i64])
        .collect();
    ckpt.push_i64("meta.cnn_layers", vec![cfg.cnn_layers.len(), 3], cnn)
        .expect("fresh name");
    ckpt.push_i64(
        "meta.backbone",
        vec![6],
        vec![
            cfg.model_dim as i64,
            cfg.num_blocks as i64,
            cfg.num_heads as i64,
            cfg.ffn_dim as i64,
            cfg.rel_pos_buckets as i64,
            cfg.rel_pos_max_distance as i64,
        ],
    )
    .expect("fresh name");
    ckpt.push_i64_scalar("meta.rel_pos_enabled", cfg.rel_pos_enabled as i64)
        .expect("fresh name");
    ckpt.push_i64(
        "meta.stft",
        vec![3],
        vec![stft.window_len as i64, stft.hop as i64, stft.fft_size as i64],
    )
    .expect("fresh name");
}

pub fn backbone_config_from_checkpoint(ckpt: &Checkpoint) -> Result<BackboneConfig> {
    let cnn = ckpt
        .get("meta.cnn_layers")
        .ok_or_else(|| CheckpointError::MissingTensor("meta.cnn_layers".into()))?;
    let layers: Vec<CnnLayerSpec> = cnn
        .as_i64()?
        .chunks_exact(3)
        .map(|c| CnnLayerSpec {
            out_channels: c[0] as usize,
            kernel: c[1] as usize,
            stride: c[2] as usize,
        })
        .collect();
    let b = ckpt
        .get("meta.backbone")
        .ok_or_else(|| CheckpointError::MissingTensor("meta.backbone".into()))?
        .as_i64()?
        .to_vec();
    if b.len() != 6 {
        return Err(TrainError::BadConfig("meta.backbone must have 6 entries".into()));
    }
    let rel_enabled = ckpt
        .get("meta.rel_pos_enabled")
        .map(|t| t.scalar_i64().unwrap_or(1) != 0)
        .unwrap_or(true);
    Ok(BackboneConfig {
        cnn_layers: layers,
        model_dim: b[0] as usize,
        num_blocks: b[1] as usize,
        num_heads: b[2] as usize,
        ffn_dim: b[3] as usize,
        rel_pos_buckets: b[4] as usize,
        rel_pos_max_distance: b[5] as usize,
        rel_pos_enabled: rel_enabled,
    })
}

pub fn stft_config_from_checkpoint(ckpt: &Checkpoint) -> Result<StftConfig> {
    let t = ckpt
        .get("meta.stft")
        .ok_or_else(|| CheckpointError::MissingTensor("meta.stft".into()))?;
    let v = t.as_i64()?;
    if v.len() != 3 {
        return Err(TrainError::BadConfig("meta.stft must have 3 entries".into()));
    }
    Ok(StftConfig {
        window_len: v[0] as usize,
        hop: v[1] as usize,
        fft_size: v[2] as usize,
    })
}

/// Masked-prediction pre-training over unlabeled speech, one utterance
/// per step, optionally mixing noise into the input (never the targets).
pub fn pretrain<T: Real>(
    cfg: &PretrainConfig,
    speech: &DatasetManifest,
    noise: Option<&DatasetManifest>,
    out_dir: &Path,
) -> Result<PretrainResult> {
    if speech.is_empty() {
        return Err(MixError::EmptyManifest("speech").into());
    }
    if cfg.noise_mixing && noise.map(|n| n.is_empty()).unwrap_or(true) {
        return Err(MixError::EmptyManifest("noise").into());
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let factor = cfg.frame_factor()?;
    let fb = MelFilterbank::new(cfg.stft.fft_size, dsp::N_MELS, 0.0, SAMPLE_RATE as f64 / 2.0, dsp::FilterNorm::default())?;
    let mut cache = WavCache::new();

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1217));
    let mut store = ParamStore::<T>::new();
    let backbone = Backbone::new(cfg.backbone.clone(), "backbone", &mut store, &mut init_rng)?;
    let cls_head;
    let reg_head;
    let codebook;
    match cfg.objective {
        Objective::Classification => {
            let cb = match &cfg.codebook {
                Some(path) => codebook_from_checkpoint(&Checkpoint::load(path)?)?,
                None => build_codebook(cfg, speech, &fb, &mut cache)?,
            };
            cls_head = Some(ClassificationHead::new(
                cfg.backbone.model_dim,
                cfg.proj_dim,
                cb.classes(),
                "pretrain_head",
                &mut store,
                &mut init_rng,
            )?);
            reg_head = None;
            codebook = Some(cb);
        }
        Objective::Regression => {
            reg_head = Some(RegressionHead::new(
                cfg.backbone.model_dim,
                dsp::N_MELS,
                "pretrain_head",
                &mut store,
                &mut init_rng,
            )?);
            cls_head = None;
            codebook = None;
        }
    }

    let mut adam = AdamState::new(&store, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = String::new();
    let mut mix_count = 0usize;
    let mut accessed = BTreeSet::new();

    for step in 0..cfg.steps {
        let mut step_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5000 + step as u64));
        let entry = &speech.entries[step_rng.random_range(0..speech.entries.len())];
        accessed.insert(entry.clip_id.clone());
        let clean = cache.get(speech, &entry.clip_id)?;

        // Targets always come from the un-mixed recording.
        let target_fbank = ssl_rate_fbank(&clean, cfg.stft, &fb, factor)?;

        let mix_coin: f64 = step_rng.random();
        let recipe_seed: u64 = step_rng.random();
        let mask_seed: u64 = step_rng.random();
        let mut mixed = false;
        let wave = if cfg.noise_mixing && mix_coin < cfg.p_mix {
            let noise_m = noise.expect("checked above");
            let single = DatasetManifest {
                root: speech.root.clone(),
                entries: vec![entry.clone()],
            };
            let recipe = mixsim::sample_recipe(recipe_seed, &single, noise_m)?;
            let noise_buf = cache.get(noise_m, &recipe.noise_id)?;
            mixed = true;
            mix_count += 1;
            mixsim::mix(&clean, &noise_buf, &recipe)?
        } else {
            clean.clone()
        };

        let mut g = Graph::<T>::new();
        let bind = backbone.bind(&mut g, &store, BindMode::Trainable);
        let wave_arr =
            Array2::from_shape_vec((1, wave.len()), wave.samples.clone()).expect("row vector");
        let wave_var = g.input(array_from_f64::<T>(&wave_arr.into_dyn()));
        let x = backbone.cnn_encode(&mut g, &bind, wave_var)?;
        let ssl_frames = g.shape(x)[0];
        let aligned = ssl_frames.min(target_fbank.nrows());
        if aligned == 0 {
            return Err(TrainError::BadConfig(format!(
                "utterance {} too short for one SSL frame",
                entry.clip_id
            )));
        }
        let mask = gen_mask_spans_nonempty(aligned, cfg.mask_start_prob, cfg.mask_span_len, mask_seed);
        let masked = backbone.apply_mask(&mut g, &bind, x, &mask.masked_indices)?;
        let outs = backbone.transformer(&mut g, &bind, masked)?;
        let mut h_last = *outs.last().expect("at least one block");
        if ssl_frames > aligned {
            h_last = g.slice(h_last, 0, 0, aligned)?;
        }

        let loss = match cfg.objective {
            Objective::Regression => {
                let head = reg_head.as_ref().expect("regression head built");
                let hb = crate::models::bind_params(&mut g, &store, head.ordered_ids(), BindMode::Trainable);
                let target = target_fbank.slice(ndarray::s![..aligned, ..]).to_owned();
                let tv = g.input(array_from_f64::<T>(&target.into_dyn()));
                regression_loss(&mut g, head, &hb, h_last, tv, &mask)?
            }
            Objective::Classification => {
                let head = cls_head.as_ref().expect("classification head built");
                let hb = crate::models::bind_params(&mut g, &store, head.ordered_ids(), BindMode::Trainable);
                let target = target_fbank.slice(ndarray::s![..aligned, ..]).to_owned();
                let z = assign(&target, codebook.as_ref().expect("codebook built"));
                classification_loss(&mut g, head, &hb, h_last, &z, &mask)?
            }
        };

        let loss_value = g.scalar(loss).as_f64();
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        g.backward(loss)?;
        let mut grads = GradBuffer::new(&store);
        g.accumulate_param_grads(&mut grads);
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_frac);
        adam.step(&mut store, &grads, lr);

        losses.push(loss_value);
        log.push_str(&format!(
            "{step}\t{loss_value:.9e}\t{lr:.9e}\t{}\n",
            if mixed { 1 } else { 0 }
        ));
    }

    let mut ckpt = Checkpoint::from_store(&store);
    if let Some(cb) = &codebook {
        ckpt.push_real::<f64>("quantizer.centroids", &cb.centroids.clone().into_dyn())?;
        ckpt.push_i64_scalar("quantizer.C", cb.classes() as i64)?;
    }
    meta_from_backbone(&mut ckpt, &cfg.backbone, cfg.stft);
    ckpt.push_i64_scalar("meta.step", cfg.steps as i64)?;
    ckpt.push_i64_scalar("meta.seed", cfg.seed as i64)?;
    ckpt.push_i64_scalar("meta.config_hash", cfg.config_hash as i64)?;
    ckpt.push_i64_scalar(
        "meta.objective",
        match cfg.objective {
            Objective::Classification => 0,
            Objective::Regression => 1,
        },
    )?;

    let checkpoint_path = out_dir.join("pretrain.ckpt");
    ckpt.save(&checkpoint_path)?;
    let loss_log_path = out_dir.join("loss.log");
    fs::write(&loss_log_path, log).map_err(|e| io_err(&loss_log_path, e))?;
    Ok(PretrainResult {
        checkpoint_path,
        loss_log_path,
        losses,
        mix_count,
        accessed_clips: accessed,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub backbone_checkpoint: Option<PathBuf>,
    pub freeze_backbone: bool,
    pub head_layers: usize,
    pub head_hidden: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub stft: StftConfig,
    pub restoration_exponent: f64,
    pub config_hash: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            backbone_checkpoint: None,
            freeze_backbone: true,
            head_layers: 2,
            head_hidden: 128,
            steps: 500,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            grad_clip: 5.0,
            seed: 0,
            stft: StftConfig::default(),
            restoration_exponent: 1.0,
            config_hash: 0,
        }
    }
}

#[derive(Debug)]
pub struct FinetuneResult {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub losses: Vec<f64>,
    pub accessed_pairs: BTreeSet<String>,
}

/// A loaded enhancement model: optional frozen backbone plus head.
pub struct EnhancementModel<T: Real> {
    pub store: ParamStore<T>,
    pub backbone: Option<Backbone>,
    pub head: EnhancementHead,
    pub stft: StftConfig,
}

impl<T: Real> EnhancementModel<T> {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let stft = stft_config_from_checkpoint(&ckpt)?;
        let head_meta = ckpt
            .get("meta.head")
            .ok_or_else(|| CheckpointError::MissingTensor("meta.head".into()))?
            .as_i64()?
            .to_vec();
        if head_meta.len() != 4 {
            return Err(TrainError::BadConfig("meta.head must have 4 entries".into()));
        }
        let has_backbone = ckpt.names().any(|n| n.starts_with("backbone."));
        let mut store = ParamStore::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = if has_backbone {
            let bcfg = backbone_config_from_checkpoint(&ckpt)?;
            Some(Backbone::new(bcfg, "backbone", &mut store, &mut rng)?)
        } else {
            None
        };
        let head_cfg = EnhancementHeadConfig {
            recurrent_layers: head_meta[0] as usize,
            hidden_units: head_meta[1] as usize,
            input_dim: head_meta[2] as usize,
            output_bins: head_meta[3] as usize,
            tied: false,
        };
        let head = EnhancementHead::new(head_cfg, "head", &mut store, &mut rng)?;
        ckpt.apply_to_store(&mut store, true)?;
        Ok(Self {
            store,
            backbone,
            head,
            stft,
        })
    }

    /// Frame factor between STFT frames and SSL frames.
    fn factor(&self) -> usize {
        self.backbone
            .as_ref()
            .map(|b| b.cfg.total_stride() / self.stft.hop)
            .unwrap_or(1)
    }

    /// Predict the magnitude mask for a noisy utterance.
    pub fn predict_mask(&self, noisy: &AudioBuffer) -> Result<Array2<f64>> {
        let spec = dsp::stft(noisy, self.stft)?;
        let mag = dsp::magnitude(&spec);
        let mut g = Graph::<T>::new();
        let mag_var = g.input(array_from_f64::<T>(&mag.values.clone().into_dyn()));
        let latent = match &self.backbone {
            Some(backbone) => {
                let bind = backbone.bind(&mut g, &self.store, BindMode::Frozen);
                let wave_arr = Array2::from_shape_vec((1, noisy.len()), noisy.samples.clone())
                    .expect("row vector");
                let wave = g.input(array_from_f64::<T>(&wave_arr.into_dyn()));
                let x = backbone.cnn_encode(&mut g, &bind, wave)?;
                let outs = backbone.transformer(&mut g, &bind, x)?;
                let h_last = *outs.last().expect("blocks");
                let ssl_frames = g.shape(h_last)[0];
                let idx = dsp::duplication_indices(ssl_frames, self.factor(), mag.frames())?;
                Some(g.gather_rows(h_last, &idx)?)
            }
            None => None,
        };
        let hb = self.head.bind(&mut g, &self.store, BindMode::Frozen);
        let mask = enhancement_forward(&mut g, &self.head, &hb, mag_var, latent)?;
        Ok(array_to_f64(g.value(mask))
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mask is 2-d"))
    }
}

/// Magnitude-mask fine-tuning on simulated noisy/clean pairs. The
/// backbone (when present) is frozen by default and used as a feature
/// extractor.
pub fn finetune<T: Real>(
    cfg: &FinetuneConfig,
    pairs: &PairedManifest,
    out_dir: &Path,
) -> Result<FinetuneResult> {
    if pairs.pairs.is_empty() {
        return Err(TrainError::BadConfig("empty paired manifest".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let bins = cfg.stft.bins();

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0FF1CE));
    let mut store = ParamStore::<T>::new();
    let backbone = match &cfg.backbone_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let ckpt_stft = stft_config_from_checkpoint(&ckpt)?;
            if ckpt_stft != cfg.stft {
                return Err(TrainError::DspMismatch {
                    ckpt: ckpt_stft,
                    cfg: cfg.stft,
                });
            }
            let bcfg = backbone_config_from_checkpoint(&ckpt)?;
            let backbone = Backbone::new(bcfg, "backbone", &mut store, &mut init_rng)?;
            // Strict load of the backbone tensors only: the pre-training
            // head tensors are allowed to remain in the container.
            for (_, p) in store.iter() {
                let t = ckpt
                    .get(&p.name)
                    .ok_or_else(|| CheckpointError::MissingTensor(p.name.clone()))?;
                if t.dims != p.value.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: p.name.clone(),
                        got: t.dims.clone(),
                        want: p.value.shape().to_vec(),
                    }
                    .into());
                }
            }
            let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
            for (id, name) in ids {
                *store.value_mut(id) = ckpt.get(&name).expect("checked").to_real::<T>()?;
            }
            Some(backbone)
        }
        None => None,
    };
    let input_dim = bins
        + backbone
            .as_ref()
            .map(|b| b.cfg.model_dim)
            .unwrap_or(0);
    let head_cfg = EnhancementHeadConfig {
        recurrent_layers: cfg.head_layers,
        hidden_units: cfg.head_hidden,
        input_dim,
        output_bins: bins,
        tied: false,
    };
    let head = EnhancementHead::new(head_cfg, "head", &mut store, &mut init_rng)?;
    let factor = backbone
        .as_ref()
        .map(|b| b.cfg.total_stride() / cfg.stft.hop)
        .unwrap_or(1);

    let backbone_mode = if cfg.freeze_backbone {
        BindMode::Frozen
    } else {
        BindMode::Trainable
    };
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = String::new();
    let mut accessed = BTreeSet::new();
    let mut noisy_cache: BTreeMap<String, (AudioBuffer, AudioBuffer)> = BTreeMap::new();

    for step in 0..cfg.steps {
        let mut step_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x6000 + step as u64));
        let pair = &pairs.pairs[step_rng.random_range(0..pairs.pairs.len())];
        accessed.insert(pair.pair_id.clone());
        let (noisy, clean) = match noisy_cache.get(&pair.pair_id) {
            Some(b) => b.clone(),
            None => {
                let n = audio::read_wav(&pairs.resolve_noisy(pair))?;
                let c = audio::read_wav(&pairs.resolve_clean(pair))?;
                noisy_cache.insert(pair.pair_id.clone(), (n.clone(), c.clone()));
                (n, c)
            }
        };

        let noisy_spec = dsp::stft(&noisy, cfg.stft)?;
        let clean_spec = dsp::stft(&clean, cfg.stft)?;
        let noisy_mag = dsp::magnitude(&noisy_spec);
        let clean_mag = dsp::magnitude(&clean_spec);

        let mut g = Graph::<T>::new();
        let mag_var = g.input(array_from_f64::<T>(&noisy_mag.values.clone().into_dyn()));
        let clean_var = g.input(array_from_f64::<T>(&clean_mag.values.clone().into_dyn()));
        let latent = match &backbone {
            Some(bb) => {
                let bind = bb.bind(&mut g, &store, backbone_mode);
                let wave_arr = Array2::from_shape_vec((1, noisy.len()), noisy.samples.clone())
                    .expect("row vector");
                let wave = g.input(array_from_f64::<T>(&wave_arr.into_dyn()));
                let x = bb.cnn_encode(&mut g, &bind, wave)?;
                let outs = bb.transformer(&mut g, &bind, x)?;
                let h_last = *outs.last().expect("blocks");
                let ssl_frames = g.shape(h_last)[0];
                let idx = dsp::duplication_indices(ssl_frames, factor, noisy_mag.frames())?;
                Some(g.gather_rows(h_last, &idx)?)
            }
            None => None,
        };
        let hb = head.bind(&mut g, &store, BindMode::Trainable);
        let mask = enhancement_forward(&mut g, &head, &hb, mag_var, latent)?;
        let loss = signal_restoration_loss(&mut g, mask, mag_var, clean_var, cfg.restoration_exponent)?;

        let loss_value = g.scalar(loss).as_f64();
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        g.backward(loss)?;
        let mut grads = GradBuffer::new(&store);
        g.accumulate_param_grads(&mut grads);
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_frac);
        adam.step(&mut store, &grads, lr);

        losses.push(loss_value);
        log.push_str(&format!("{step}\t{loss_value:.9e}\t{lr:.9e}\t0\n"));
    }

    let mut ckpt = Checkpoint::from_store(&store);
    if let Some(bb) = &backbone {
        meta_from_backbone(&mut ckpt, &bb.cfg, cfg.stft);
    } else {
        ckpt.push_i64(
            "meta.stft",
            vec![3],
            vec![
                cfg.stft.window_len as i64,
                cfg.stft.hop as i64,
                cfg.stft.fft_size as i64,
            ],
        )?;
    }
    ckpt.push_i64(
        "meta.head",
        vec![4],
        vec![
            cfg.head_layers as i64,
            cfg.head_hidden as i64,
            input_dim as i64,
            bins as i64,
        ],
    )?;
    ckpt.push_i64_scalar("meta.step", cfg.steps as i64)?;
    ckpt.push_i64_scalar("meta.seed", cfg.seed as i64)?;
    ckpt.push_i64_scalar("meta.config_hash", cfg.config_hash as i64)?;

    let checkpoint_path = out_dir.join("finetune.ckpt");
    ckpt.save(&checkpoint_path)?;
    let loss_log_path = out_dir.join("loss.log");
    fs::write(&loss_log_path, log).map_err(|e| io_err(&loss_log_path, e))?;
    Ok(FinetuneResult {
        checkpoint_path,
        loss_log_path,
        losses,
        accessed_pairs: accessed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_pretrain_cfg(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            peak_lr: 2e-3,
            backbone: BackboneConfig::small(),
            proj_dim: 16,
            quantizer_classes: 8,
            quantizer_iters: 5,
            quantizer_max_frames: 400,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn pretrain_without_mixing_never_invokes_the_mixer() {
        let dir = tempfile::tempdir().unwrap();
        let (speech, _) = synth::generate_corpus(&dir.path().join("c"), 3, 2, 0.6, 1).unwrap();
        let cfg = PretrainConfig {
            noise_mixing: false,
            ..tiny_pretrain_cfg(5)
        };
        let res = pretrain::<f64>(&cfg, &speech, None, &dir.path().join("run")).unwrap();
        assert_eq!(res.mix_count, 0);
        assert_eq!(res.losses.len(), 5);
    }

    #[test]
    fn pretrain_with_p_mix_one_mixes_every_step() {
        let dir = tempfile::tempdir().unwrap();
        let (speech, noise) = synth::generate_corpus(&dir.path().join("c"), 3, 2, 0.6, 2).unwrap();
        let cfg = PretrainConfig {
            noise_mixing: true,
            p_mix: 1.0,
            ..tiny_pretrain_cfg(6)
        };
        let res = pretrain::<f64>(&cfg, &speech, Some(&noise), &dir.path().join("run")).unwrap();
        assert_eq!(res.mix_count, 6);
    }

    #[test]
    fn pretrain_is_deterministic_in_double_precision() {
        let dir = tempfile::tempdir().unwrap();
        let (speech, noise) = synth::generate_corpus(&dir.path().join("c"), 3, 2, 0.6, 3).unwrap();
        let cfg = PretrainConfig {
            noise_mixing: true,
            p_mix: 0.5,
            ..tiny_pretrain_cfg(6)
        };
        let r1 = pretrain::<f64>(&cfg, &speech, Some(&noise), &dir.path().join("a")).unwrap();
        let r2 = pretrain::<f64>(&cfg, &speech, Some(&noise), &dir.path().join("b")).unwrap();
        let log1 = fs::read(&r1.loss_log_path).unwrap();
        let log2 = fs::read(&r2.loss_log_path).unwrap();
        assert_eq!(log1, log2);
        let c1 = fs::read(&r1.checkpoint_path).unwrap();
        let c2 = fs::read(&r2.checkpoint_path).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn classification_pretrain_stores_the_codebook() {
        let dir = tempfile::tempdir().unwrap();
        let (speech, _) = synth::generate_corpus(&dir.path().join("c"), 3, 1, 0.6, 4).unwrap();
        let cfg = PretrainConfig {
            objective: Objective::Classification,
            ..tiny_pretrain_cfg(3)
        };
        let res = pretrain::<f64>(&cfg, &speech, None, &dir.path().join("run")).unwrap();
        let ckpt = Checkpoint::load(&res.checkpoint_path).unwrap();
        let c = ckpt.get("quantizer.C").unwrap().scalar_i64().unwrap();
        assert_eq!(c, 8);
        let centroids = ckpt.get("quantizer.centroids").unwrap();
        assert_eq!(centroids.dims, vec![8, 80]);
        assert_eq!(
            ckpt.get("meta.objective").unwrap().scalar_i64().unwrap(),
            0
        );
    }

    #[test]
    fn finetune_baseline_runs_and_freeze_contract_holds() {
        let dir = tempfile::tempdir().unwrap();
        let (speech, noise) = synth::generate_corpus(&dir.path().join("c"), 3, 2, 0.7, 5).unwrap();
        let pairs =
            mixsim::simulate_corpus(&speech, &noise, 4, 9, &dir.path().join("sim"), 1).unwrap();

        // Pretrain a tiny backbone.
        let pcfg = tiny_pretrain_cfg(3);
        let pres = pretrain::<f64>(&pcfg, &speech, None, &dir.path().join("pre")).unwrap();

        // Baseline head only.
        let fcfg = FinetuneConfig {
            steps: 4,
            head_layers: 1,
            head_hidden: 8,
            ..FinetuneConfig::default()
        };
        let base = finetune::<f64>(&fcfg, &pairs, &dir.path().join("ft_base")).unwrap();
        assert_eq!(base.losses.len(), 4);
        assert!(!base.accessed_pairs.is_empty());

        // With a frozen backbone: backbone tensors must remain
        // byte-identical to the loaded checkpoint.
        let fcfg2 = FinetuneConfig {
            backbone_checkpoint: Some(pres.checkpoint_path.clone()),
            steps: 4,
            head_layers: 1,
            head_hidden: 8,
            ..FinetuneConfig::default()
        };
        let ft = finetune::<f64>(&fcfg2, &pairs, &dir.path().join("ft_ssl")).unwrap();
        let before = Checkpoint::load(&pres.checkpoint_path).unwrap();
        let after = Checkpoint::load(&ft.checkpoint_path).unwrap();
        for t in &before.tensors {
            if t.name.starts_with("backbone.") {
                let loaded = after.get(&t.name).expect("backbone tensor kept");
                assert_eq!(loaded, t, "{} changed during frozen fine-tuning", t.name);
            }
        }

        // The fine-tuned model reloads and predicts a mask of the right
        // shape.
        let model = EnhancementModel::<f64>::from_checkpoint(&ft.checkpoint_path).unwrap();
        let noisy = audio::read_wav(&pairs.resolve_noisy(&pairs.pairs[0])).unwrap();
        let mask = model.predict_mask(&noisy).unwrap();
        assert_eq!(mask.ncols(), fcfg2.stft.bins());
        assert!(mask.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let peak = 1e-3;
        let lrs: Vec<f64> = (0..100).map(|s| lr_at(s, 100, peak, 0.1)).collect();
        assert!(lrs[0] < lrs[9]);
        assert!((lrs[9] - peak).abs() < 1e-12);
        assert!(lrs[50] < lrs[10]);
        assert!(lrs[99] > 0.0);
    }
}
