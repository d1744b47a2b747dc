//! Masking span generation, k-means target quantization, the masked
//! classification and regression objectives, and the L2 signal
//! restoration loss for fine-tuning.
//!
//! Both pre-training losses gather the masked rows before any reduction,
//! so the loss value depends on the unmasked frames not at all, at the
//! bit level.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::{uniform_init, BindMode, Binding};
use crate::tensor::{Graph, ParamId, ParamStore, Real, TensorError, Var};

/// Logit scale of the classification distribution.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Span-start probability and span length defaults for mask generation.
pub const DEFAULT_MASK_START_PROB: f64 = 0.065;
pub const DEFAULT_MASK_SPAN_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("no masked frames")]
    EmptyMask,
    #[error("mask index {index} out of range for {frames} frames")]
    MaskOutOfRange { index: usize, frames: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("k-means needs at least as many points as classes: {n} < {c}")]
    TooFewPoints { n: usize, c: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

// ---------------------------------------------------------------------
// Mask spans
// ---------------------------------------------------------------------

/// Set of masked frame indices with the generating hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Sorted, unique.
    pub masked_indices: Vec<usize>,
    pub span_length: usize,
    pub start_prob: f64,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        for &i in &self.masked_indices {
            if i >= frames {
                return Err(ObjectiveError::MaskOutOfRange { index: i, frames });
            }
        }
        Ok(())
    }

    /// Retain only indices below `frames` (for target-alignment
    /// truncation at sequence ends).
    pub fn truncated(&self, frames: usize) -> MaskSpec {
        MaskSpec {
            masked_indices: self
                .masked_indices
                .iter()
                .copied()
                .filter(|&i| i < frames)
                .collect(),
            span_length: self.span_length,
            start_prob: self.start_prob,
        }
    }
}

/// Each frame starts a span of length `l` with probability `p`; spans are
/// unioned and truncated at the sequence end. Deterministic given seed.
pub fn gen_mask_spans(frames: usize, p: f64, l: usize, seed: u64) -> MaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; frames];
    for t in 0..frames {
        if rng.random::<f64>() < p {
            for cell in masked.iter_mut().skip(t).take(l) {
                *cell = true;
            }
        }
    }
    MaskSpec {
        masked_indices: (0..frames).filter(|&t| masked[t]).collect(),
        span_length: l,
        start_prob: p,
    }
}

/// Like [`gen_mask_spans`] but retries with seed+1 until nonempty, so the
/// per-step loss is always defined.
pub fn gen_mask_spans_nonempty(frames: usize, p: f64, l: usize, seed: u64) -> MaskSpec {
    let mut s = seed;
    loop {
        let spec = gen_mask_spans(frames, p, l, s);
        if !spec.is_empty() {
            return spec;
        }
        s = s.wrapping_add(1);
    }
}

// ---------------------------------------------------------------------
// K-means quantizer
// ---------------------------------------------------------------------

/// Discrete-target codebook over log-mel frames.
#[derive(Debug, Clone)]
pub struct QuantizerCodebook {
    /// C x feature_dim centroids.
    pub centroids: Array2<f64>,
}

impl QuantizerCodebook {
    pub fn classes(&self) -> usize {
        self.centroids.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct KmeansRun {
    pub codebook: QuantizerCodebook,
    /// Sum of squared distances after each Lloyd iteration.
    pub sse_per_iter: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Lloyd's algorithm with seeded k-means++ initialization; assignment is
/// nearest centroid with ties broken by lowest index. Empty clusters are
/// re-seeded on the point farthest from its centroid.
pub fn kmeans_quantize(features: &Array2<f64>, c: usize, iters: usize, seed: u64) -> Result<KmeansRun> {
    let n = features.nrows();
    let d = features.ncols();
    if n < c || c < 2 {
        return Err(ObjectiveError::TooFewPoints { n, c });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((c, d));

    // k-means++: first uniform, then squared-distance weighted.
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut best_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), centroids.row(0)))
        .collect();
    for k in 1..c {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(k).assign(&features.row(chosen));
        for i in 0..n {
            best_d2[i] = best_d2[i].min(sq_dist(features.row(i), centroids.row(k)));
        }
    }

    let mut sse_per_iter = Vec::with_capacity(iters);
    let mut assignments = vec![0usize; n];
    for _ in 0..iters {
        // Assign.
        let mut sse = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut bd = f64::INFINITY;
            for k in 0..c {
                let dist = sq_dist(features.row(i), centroids.row(k));
                if dist < bd {
                    bd = dist;
                    best = k;
                }
            }
            assignments[i] = best;
            sse += bd;
        }
        sse_per_iter.push(sse);
        // Update.
        let mut sums = Array2::<f64>::zeros((c, d));
        let mut counts = vec![0usize; c];
        for i in 0..n {
            let k = assignments[i];
            let mut row = sums.row_mut(k);
            row += &features.row(i);
            counts[k] += 1;
        }
        for k in 0..c {
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                centroids
                    .row_mut(k)
                    .assign(&sums.row(k).mapv(|v| v * inv));
            } else {
                // Re-seed on the farthest point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(features.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(features.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("nonempty features");
                centroids.row_mut(k).assign(&features.row(far));
            }
        }
    }
    Ok(KmeansRun {
        codebook: QuantizerCodebook { centroids },
        sse_per_iter,
    })
}

/// Nearest-centroid assignment, ties to the lowest index.
pub fn assign(features: &Array2<f64>, codebook: &QuantizerCodebook) -> Vec<usize> {
    (0..features.nrows())
        .map(|i| {
            let mut best = 0usize;
            let mut bd = f64::INFINITY;
            for k in 0..codebook.centroids.nrows() {
                let d = sq_dist(features.row(i), codebook.centroids.row(k));
                if d < bd {
                    bd = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------
// Pre-training heads and losses
// ---------------------------------------------------------------------

/// Projection + class embeddings + temperature of the classification
/// distribution: p(c | h_t) = softmax_c(sim(W h_t, e_c) / tau).
pub struct ClassificationHead {
    pub projection: ParamId,
    pub embeddings: ParamId,
    pub temperature: f64,
    pub classes: usize,
    pub proj_dim: usize,
    ordered: Vec<ParamId>,
}

impl ClassificationHead {
    pub fn new<T: Real>(
        model_dim: usize,
        proj_dim: usize,
        classes: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let projection = store.register(
            &format!("{prefix}.projection"),
            uniform_init(rng, &[proj_dim, model_dim], model_dim),
        )?;
        let embeddings = store.register(
            &format!("{prefix}.class_embeddings"),
            uniform_init(rng, &[classes, proj_dim], proj_dim),
        )?;
        Ok(Self {
            projection,
            embeddings,
            temperature: DEFAULT_TEMPERATURE,
            classes,
            proj_dim,
            ordered: vec![projection, embeddings],
        })
    }

    pub fn ordered_ids(&self) -> &[ParamId] {
        &self.ordered
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: BindMode) -> Binding {
        crate::models::bind_params(g, store, &self.ordered, mode)
    }

    pub fn bind_arrays<T: Real>(&self, g: &mut Graph<T>, arrays: &[ndarray::ArrayD<T>]) -> Binding {
        crate::models::bind_param_arrays(g, &self.ordered, arrays)
    }

    pub fn bind_vars(&self, vars: &[Var]) -> Binding {
        crate::models::bind_param_vars(&self.ordered, vars)
    }
}

/// Linear map from hidden states to the 80-dim regression target space.
pub struct RegressionHead {
    pub projection: ParamId,
    pub out_dim: usize,
    ordered: Vec<ParamId>,
}

impl RegressionHead {
    pub fn new<T: Real>(
        model_dim: usize,
        out_dim: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let projection = store.register(
            &format!("{prefix}.projection"),
            uniform_init(rng, &[out_dim, model_dim], model_dim),
        )?;
        Ok(Self {
            projection,
            out_dim,
            ordered: vec![projection],
        })
    }

    pub fn ordered_ids(&self) -> &[ParamId] {
        &self.ordered
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: BindMode) -> Binding {
        crate::models::bind_params(g, store, &self.ordered, mode)
    }

    pub fn bind_arrays<T: Real>(&self, g: &mut Graph<T>, arrays: &[ndarray::ArrayD<T>]) -> Binding {
        crate::models::bind_param_arrays(g, &self.ordered, arrays)
    }

    pub fn bind_vars(&self, vars: &[Var]) -> Binding {
        crate::models::bind_param_vars(&self.ordered, vars)
    }
}

/// Class distribution per frame: rows of softmax(sim(W h_t, e_c) / tau).
pub fn classification_probabilities<T: Real>(
    g: &mut Graph<T>,
    proj: Var,
    embeddings: Var,
    temperature: f64,
    h: Var,
) -> Result<Var> {
    let wt = g.transpose(proj)?;
    let p = g.matmul(h, wt)?;
    let pn = g.l2_normalize(p, 1)?;
    let en = g.l2_normalize(embeddings, 1)?;
    let ent = g.transpose(en)?;
    let sims = g.matmul(pn, ent)?;
    let logits = g.scale(sims, T::from_f64(1.0 / temperature))?;
    Ok(g.softmax(logits, 1)?)
}

/// Mean negative log-likelihood of the discrete targets over the masked
/// frames only.
pub fn classification_loss<T: Real>(
    g: &mut Graph<T>,
    head: &ClassificationHead,
    bind: &Binding,
    h_last: Var,
    targets: &[usize],
    mask: &MaskSpec,
) -> Result<Var> {
    let frames = g.shape(h_last)[0];
    if targets.len() != frames {
        return Err(ObjectiveError::DimMismatch(format!(
            "{} targets for {} frames",
            targets.len(),
            frames
        )));
    }
    mask.validate(frames)?;
    if mask.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    for &t in &mask.masked_indices {
        if targets[t] >= head.classes {
            return Err(ObjectiveError::DimMismatch(format!(
                "target {} at frame {t} exceeds {} classes",
                targets[t], head.classes
            )));
        }
    }

    let rows = g.gather_rows(h_last, &mask.masked_indices)?;
    let probs = classification_probabilities(
        g,
        bind.var(head.projection),
        bind.var(head.embeddings),
        head.temperature,
        rows,
    )?;
    let logp = g.log(probs)?;
    let coords: Vec<(usize, usize)> = mask
        .masked_indices
        .iter()
        .enumerate()
        .map(|(row, &t)| (row, targets[t]))
        .collect();
    let picked = g.gather_entries(logp, &coords)?;
    let mean = g.mean_all(picked)?;
    Ok(g.scale(mean, -T::one())?)
}

/// Mean per-cell squared error between the projected hidden states and
/// the regression targets, over the masked frames only.
pub fn regression_loss<T: Real>(
    g: &mut Graph<T>,
    head: &RegressionHead,
    bind: &Binding,
    h_last: Var,
    targets: Var,
    mask: &MaskSpec,
) -> Result<Var> {
    let frames = g.shape(h_last)[0];
    let tshape = g.shape(targets);
    if tshape[0] != frames || tshape[1] != head.out_dim {
        return Err(ObjectiveError::DimMismatch(format!(
            "targets {tshape:?} vs {frames} frames x {} dims",
            head.out_dim
        )));
    }
    mask.validate(frames)?;
    if mask.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let rows = g.gather_rows(h_last, &mask.masked_indices)?;
    let wt = g.transpose(bind.var(head.projection))?;
    let pred = g.matmul(rows, wt)?;
    let target_rows = g.gather_rows(targets, &mask.masked_indices)?;
    let diff = g.sub(pred, target_rows)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq)?)
}

/// Mean over all cells of (mask * noisy - clean)^2, optionally on
/// compressed magnitudes (exponent != 1).
pub fn signal_restoration_loss<T: Real>(
    g: &mut Graph<T>,
    mask_hat: Var,
    noisy_mag: Var,
    clean_mag: Var,
    compression_exponent: f64,
) -> Result<Var> {
    let (sm, sn, sc) = (g.shape(mask_hat), g.shape(noisy_mag), g.shape(clean_mag));
    if sm != sn || sn != sc {
        return Err(ObjectiveError::DimMismatch(format!(
            "mask {sm:?}, noisy {sn:?}, clean {sc:?}"
        )));
    }
    let est = g.mul(mask_hat, noisy_mag)?;
    let (est, clean) = if compression_exponent == 1.0 {
        (est, clean_mag)
    } else {
        let c = T::from_f64(compression_exponent);
        (g.powf(est, c)?, g.powf(clean_mag, c)?)
    };
    let diff = g.sub(est, clean)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq)?)
}
