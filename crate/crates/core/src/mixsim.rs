//! Deterministic, seeded synthesis of noisy/clean pairs: uniform noise-clip
//! selection, random cropping and placement, SNR-controlled gain, resource
//! subsetting and corpus simulation with reproducible recipe files.
//!
//! All sampled recipe fields are quantized to six decimal places at
//! sampling time, so the recipes file represents every recipe exactly and
//! regenerating from a parsed file reproduces bit-identical audio.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError};
use crate::{derive_seed, SAMPLE_RATE};

/// SNR range of the default sampler, in dB.
pub const SNR_RANGE_DB: (f64, f64) = (-5.0, 20.0);

#[derive(Debug, Error)]
pub enum MixError {
    #[error("empty {0} manifest")]
    EmptyManifest(&'static str),
    #[error("manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("degenerate energy for SNR scaling")]
    DegenerateEnergy,
    #[error("recipe geometry invalid: {0}")]
    BadGeometry(String),
    #[error("speech hours limit {requested:.3} h exceeds available {available:.3} h")]
    HoursExceedAvailable { requested: f64, available: f64 },
    #[error("noise fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MixError>;

fn io_err(path: &Path, source: std::io::Error) -> MixError {
    MixError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Quantize to six decimal places, matching the recipes file precision.
fn q6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn floor6(x: f64) -> f64 {
    (x * 1e6).floor() / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipKind {
    Speech,
    Noise,
}

impl fmt::Display for ClipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipKind::Speech => write!(f, "speech"),
            ClipKind::Noise => write!(f, "noise"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub duration_s: f64,
    pub kind: ClipKind,
}

/// Catalog of available clips. Paths resolve against `root`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { root, entries };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(MixError::BadManifest {
                    path: self.root.display().to_string(),
                    reason: format!("duplicate clip_id {}", e.clip_id),
                });
            }
            if !(e.duration_s > 0.0) {
                return Err(MixError::BadManifest {
                    path: self.root.display().to_string(),
                    reason: format!("clip {} has nonpositive duration", e.clip_id),
                });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_hours(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_s).sum::<f64>() / 3600.0
    }

    pub fn find(&self, clip_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// One entry per line: `clip_id<TAB>relative_path<TAB>duration_seconds<TAB>kind`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\n",
                e.clip_id,
                e.path.display(),
                e.duration_s,
                e.kind
            ));
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |reason: String| MixError::BadManifest {
                path: path.display().to_string(),
                reason: format!("line {}: {}", lineno + 1, reason),
            };
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let duration_s: f64 = fields[2]
                .parse()
                .map_err(|_| bad(format!("bad duration {}", fields[2])))?;
            let kind = match fields[3] {
                "speech" => ClipKind::Speech,
                "noise" => ClipKind::Noise,
                other => return Err(bad(format!("unknown kind {other}"))),
            };
            entries.push(ManifestEntry {
                clip_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                duration_s,
                kind,
            });
        }
        Self::new(root, entries)
    }
}

/// Deterministic description of one noisy utterance synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecipe {
    pub clean_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub noise_crop_start_s: f64,
    pub noise_crop_len_s: f64,
    pub mix_start_s: f64,
    pub seed: u64,
}

/// Resource-condition limits applied to manifests before training.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResourceCondition {
    pub speech_hours_limit: Option<f64>,
    pub noise_fraction: Option<f64>,
}

/// Sample one mixture recipe: uniform clip choices, crop length uniform
/// over (0, min(noise, speech)], crop and mix starts uniform over their
/// valid ranges, SNR uniform over [-5, 20] dB.
pub fn sample_recipe(
    rng_seed: u64,
    speech: &DatasetManifest,
    noise: &DatasetManifest,
) -> Result<MixtureRecipe> {
    if speech.is_empty() {
        return Err(MixError::EmptyManifest("speech"));
    }
    if noise.is_empty() {
        return Err(MixError::EmptyManifest("noise"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let clean = &speech.entries[rng.random_range(0..speech.entries.len())];
    let noise_clip = &noise.entries[rng.random_range(0..noise.entries.len())];

    let max_len = noise_clip.duration_s.min(clean.duration_s);
    let crop_len = q6((1.0 - rng.random::<f64>()) * max_len)
        .clamp(1e-6, floor6(max_len).max(1e-6));
    let crop_start = q6(rng.random::<f64>() * (noise_clip.duration_s - crop_len))
        .clamp(0.0, floor6(noise_clip.duration_s - crop_len));
    let mix_start = q6(rng.random::<f64>() * (clean.duration_s - crop_len))
        .clamp(0.0, floor6(clean.duration_s - crop_len));
    let snr_db = q6(SNR_RANGE_DB.0 + (SNR_RANGE_DB.1 - SNR_RANGE_DB.0) * rng.random::<f64>());

    Ok(MixtureRecipe {
        clean_id: clean.clip_id.clone(),
        noise_id: noise_clip.clip_id.clone(),
        snr_db,
        noise_crop_start_s: crop_start,
        noise_crop_len_s: crop_len,
        mix_start_s: mix_start,
        seed: rng_seed,
    })
}

/// Sample positions of a recipe against concrete buffers.
#[derive(Debug, Clone, Copy)]
pub struct MixGeometry {
    pub mix_start: usize,
    pub crop_start: usize,
    pub crop_len: usize,
}

pub fn recipe_geometry(
    clean: &AudioBuffer,
    noise: &AudioBuffer,
    recipe: &MixtureRecipe,
) -> Result<MixGeometry> {
    let sr = SAMPLE_RATE as f64;
    let mix_start = (recipe.mix_start_s * sr).round() as usize;
    let crop_start = (recipe.noise_crop_start_s * sr).round() as usize;
    let mut crop_len = ((recipe.noise_crop_len_s * sr).round() as usize).max(1);
    if mix_start >= clean.len() || crop_start >= noise.len() {
        return Err(MixError::BadGeometry(format!(
            "start positions (mix {mix_start}, crop {crop_start}) outside buffers ({}, {})",
            clean.len(),
            noise.len()
        )));
    }
    // Sample rounding may push the crop a few samples past either buffer;
    // shorten to fit.
    crop_len = crop_len
        .min(clean.len() - mix_start)
        .min(noise.len() - crop_start);
    Ok(MixGeometry {
        mix_start,
        crop_start,
        crop_len,
    })
}

/// Mix a noise crop into the clean signal at the recipe's SNR. Outside the
/// overlap the output equals the clean input exactly; no re-normalization
/// or clipping is applied.
pub fn mix(clean: &AudioBuffer, noise: &AudioBuffer, recipe: &MixtureRecipe) -> Result<AudioBuffer> {
    let g = recipe_gain(clean, noise, recipe)?;
    let geo = recipe_geometry(clean, noise, recipe)?;
    let mut noisy = clean.samples.clone();
    for i in 0..geo.crop_len {
        noisy[geo.mix_start + i] += g * noise.samples[geo.crop_start + i];
    }
    Ok(AudioBuffer::new(noisy))
}

/// Gain applied to the noise crop so the overlap-local mean-square energy
/// ratio matches the requested SNR.
pub fn recipe_gain(clean: &AudioBuffer, noise: &AudioBuffer, recipe: &MixtureRecipe) -> Result<f64> {
    let geo = recipe_geometry(clean, noise, recipe)?;
    let e_clean = mean_square(&clean.samples[geo.mix_start..geo.mix_start + geo.crop_len]);
    let e_noise = mean_square(&noise.samples[geo.crop_start..geo.crop_start + geo.crop_len]);
    if e_clean <= 0.0 || e_noise <= 0.0 {
        return Err(MixError::DegenerateEnergy);
    }
    Ok((e_clean / (e_noise * 10f64.powf(recipe.snr_db / 10.0))).sqrt())
}

fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Overlap-local SNR of `noisy` against `clean` in dB, measured from the
/// residual. Used by tests and the acceptance suite.
pub fn measured_overlap_snr(clean: &AudioBuffer, noisy: &AudioBuffer, geo: MixGeometry) -> f64 {
    let range = geo.mix_start..geo.mix_start + geo.crop_len;
    let e_clean = mean_square(&clean.samples[range.clone()]);
    let e_resid = clean.samples[range]
        .iter()
        .zip(&noisy.samples[geo.mix_start..geo.mix_start + geo.crop_len])
        .map(|(c, n)| (n - c) * (n - c))
        .sum::<f64>()
        / geo.crop_len as f64;
    10.0 * (e_clean / e_resid).log10()
}

/// Apply resource limits: speech entries are shuffled and greedily taken
/// while the running total is below the hours limit (so the total may
/// overshoot by at most one clip); noise entries are shuffled and the
/// first ceil(fraction * N) are kept.
pub fn subset_manifest(
    manifest: &DatasetManifest,
    cond: &ResourceCondition,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut speech: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.kind == ClipKind::Speech)
        .cloned()
        .collect();
    let mut noise: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.kind == ClipKind::Noise)
        .cloned()
        .collect();

    if let Some(hours) = cond.speech_hours_limit {
        let available = speech.iter().map(|e| e.duration_s).sum::<f64>() / 3600.0;
        if hours > available {
            return Err(MixError::HoursExceedAvailable {
                requested: hours,
                available,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        speech.shuffle(&mut rng);
        let mut taken = Vec::new();
        let mut total_h = 0.0;
        for e in speech {
            if total_h >= hours {
                break;
            }
            total_h += e.duration_s / 3600.0;
            taken.push(e);
        }
        speech = taken;
    }

    if let Some(fraction) = cond.noise_fraction {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(MixError::BadFraction(fraction));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        noise.shuffle(&mut rng);
        let count = (fraction * noise.len() as f64).ceil() as usize;
        noise.truncate(count);
    }

    let mut entries = speech;
    entries.extend(noise);
    DatasetManifest::new(manifest.root.clone(), entries)
}

/// One simulated noisy/clean pair.
#[derive(Debug, Clone)]
pub struct PairEntry {
    pub pair_id: String,
    pub noisy_path: PathBuf,
    pub clean_path: PathBuf,
    pub duration_s: f64,
}

/// Catalog of simulated pairs; paths resolve against `root`.
#[derive(Debug, Clone)]
pub struct PairedManifest {
    pub root: PathBuf,
    pub pairs: Vec<PairEntry>,
}

impl PairedManifest {
    pub fn resolve_noisy(&self, p: &PairEntry) -> PathBuf {
        self.root.join(&p.noisy_path)
    }

    pub fn resolve_clean(&self, p: &PairEntry) -> PathBuf {
        self.root.join(&p.clean_path)
    }

    /// One pair per line: `pair_id<TAB>noisy_path<TAB>clean_path<TAB>duration_seconds`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                p.pair_id,
                p.noisy_path.display(),
                p.clean_path.display(),
                p.duration_s
            ));
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(MixError::BadManifest {
                    path: path.display().to_string(),
                    reason: format!("line {}: expected 4 fields", lineno + 1),
                });
            }
            pairs.push(PairEntry {
                pair_id: fields[0].to_string(),
                noisy_path: PathBuf::from(fields[1]),
                clean_path: PathBuf::from(fields[2]),
                duration_s: fields[3].parse().map_err(|_| MixError::BadManifest {
                    path: path.display().to_string(),
                    reason: format!("line {}: bad duration", lineno + 1),
                })?,
            });
        }
        Ok(Self { root, pairs })
    }
}

/// Write a recipes file: one recipe per line,
/// `pair_id<TAB>clean_id<TAB>noise_id<TAB>snr_db<TAB>noise_crop_start_s<TAB>noise_crop_len_s<TAB>mix_start_s<TAB>seed`,
/// reals with six decimal places.
pub fn save_recipes(path: &Path, recipes: &[(String, MixtureRecipe)]) -> Result<()> {
    let mut out = String::new();
    for (pair_id, r) in recipes {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            pair_id,
            r.clean_id,
            r.noise_id,
            r.snr_db,
            r.noise_crop_start_s,
            r.noise_crop_len_s,
            r.mix_start_s,
            r.seed
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_recipes(path: &Path) -> Result<Vec<(String, MixtureRecipe)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |reason: String| MixError::BadManifest {
            path: path.display().to_string(),
            reason: format!("line {}: {}", lineno + 1, reason),
        };
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad real {s}"))) };
        out.push((
            f[0].to_string(),
            MixtureRecipe {
                clean_id: f[1].to_string(),
                noise_id: f[2].to_string(),
                snr_db: parse(f[3])?,
                noise_crop_start_s: parse(f[4])?,
                noise_crop_len_s: parse(f[5])?,
                mix_start_s: parse(f[6])?,
                seed: f[7].parse().map_err(|_| bad(format!("bad seed {}", f[7])))?,
            },
        ));
    }
    Ok(out)
}

/// Simulate `count` noisy/clean pairs into `out_dir`, with a recipes file
/// and a paired manifest. Per-pair seeds derive from (seed, index), so the
/// output is independent of `workers`.
pub fn simulate_corpus(
    speech: &DatasetManifest,
    noise: &DatasetManifest,
    count: usize,
    seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<PairedManifest> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let results: Mutex<Vec<Option<(String, MixtureRecipe, PairEntry)>>> =
        Mutex::new(vec![None; count]);
    let failure: Mutex<Option<MixError>> = Mutex::new(None);

    let run_index = |k: usize| -> Result<()> {
        let pair_seed = derive_seed(seed, k as u64);
        let recipe = sample_recipe(pair_seed, speech, noise)?;
        let clean_entry = speech.find(&recipe.clean_id).expect("sampled id exists");
        let noise_entry = noise.find(&recipe.noise_id).expect("sampled id exists");
        let clean = audio::read_wav(&speech.resolve(clean_entry))?;
        let noise_buf = audio::read_wav(&noise.resolve(noise_entry))?;
        let noisy = mix(&clean, &noise_buf, &recipe)?;
        let pair_id = format!("p{k:04}");
        let noisy_name = format!("noisy_{k:04}.wav");
        let clean_name = format!("clean_{k:04}.wav");
        audio::write_wav(&out_dir.join(&noisy_name), &noisy)?;
        audio::write_wav(&out_dir.join(&clean_name), &clean)?;
        let entry = PairEntry {
            pair_id: pair_id.clone(),
            noisy_path: PathBuf::from(noisy_name),
            clean_path: PathBuf::from(clean_name),
            duration_s: clean.duration_s(),
        };
        results.lock().unwrap()[k] = Some((pair_id, recipe, entry));
        Ok(())
    };

    let workers = workers.max(1).min(count.max(1));
    if workers <= 1 {
        for k in 0..count {
            run_index(k)?;
        }
    } else {
        std::thread::scope(|scope| {
            for w in 0..workers {
                let run = &run_index;
                let failure = &failure;
                scope.spawn(move || {
                    for k in (w..count).step_by(workers) {
                        if let Err(e) = run(k) {
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

    let collected = results.into_inner().unwrap();
    let mut recipes = Vec::with_capacity(count);
    let mut pairs = Vec::with_capacity(count);
    for item in collected {
        let (pair_id, recipe, entry) = item.expect("all pairs simulated");
        recipes.push((pair_id, recipe));
        pairs.push(entry);
    }
    let manifest = PairedManifest {
        root: out_dir.to_path_buf(),
        pairs,
    };
    save_recipes(&out_dir.join("recipes.tsv"), &recipes)?;
    manifest.save(&out_dir.join("pairs.tsv"))?;
    Ok(manifest)
}
