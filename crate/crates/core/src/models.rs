//! The SSL backbone (strided CNN encoder + pre-norm transformer with gated
//! relative position bias and a learned mask embedding) and the
//! enhancement head (bi-directional LSTM producing a frequency magnitude
//! mask).
//!
//! Models own parameter ids inside a shared [`ParamStore`]; a forward pass
//! first binds parameters onto a [`Graph`] (trainable or frozen) and then
//! wires ops against the resulting [`Binding`]. Binding from raw arrays in
//! the same order supports finite-difference verification of whole models.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, ParamId, ParamStore, Real, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("frame mismatch: magnitude has {mag_frames} frames, latent has {latent_frames}")]
    FrameMismatch {
        mag_frames: usize,
        latent_frames: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, the one rule used for
/// every weight. Norm gains/biases are the exception (1 and 0).
pub fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        T::from_f64(bound * (2.0 * rng.random::<f64>() - 1.0))
    })
}

/// Parameter-to-node map for one forward pass.
pub struct Binding {
    map: BTreeMap<usize, Var>,
}

impl Binding {
    fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    fn insert(&mut self, id: ParamId, var: Var) {
        self.map.insert(id.0, var);
    }

    pub fn var(&self, id: ParamId) -> Var {
        *self.map.get(&id.0).expect("parameter bound")
    }
}

/// Whether bound parameters should receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

/// Bind a parameter id list onto a graph, trainable or frozen.
pub fn bind_params<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &[ParamId],
    mode: BindMode,
) -> Binding {
    let mut b = Binding::new();
    for &id in ids {
        let var = match mode {
            BindMode::Trainable => g.param(store, id),
            BindMode::Frozen => g.input(store.get(id).value.clone()),
        };
        b.insert(id, var);
    }
    b
}

/// Bind a parameter id list from raw arrays (finite-difference path).
pub fn bind_param_arrays<T: Real>(g: &mut Graph<T>, ids: &[ParamId], arrays: &[ArrayD<T>]) -> Binding {
    assert_eq!(ids.len(), arrays.len(), "one array per parameter");
    let mut b = Binding::new();
    for (&id, a) in ids.iter().zip(arrays.iter()) {
        b.insert(id, g.input(a.clone()));
    }
    b
}

/// Bind a parameter id list onto graph nodes that already exist, in
/// order. Used by the finite-difference harness, which owns the inputs.
pub fn bind_param_vars(ids: &[ParamId], vars: &[Var]) -> Binding {
    assert_eq!(ids.len(), vars.len(), "one var per parameter");
    let mut b = Binding::new();
    for (&id, &v) in ids.iter().zip(vars.iter()) {
        b.insert(id, v);
    }
    b
}

// ---------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub cnn_layers: Vec<CnnLayerSpec>,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    pub rel_pos_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            cnn_layers: vec![
                CnnLayerSpec {
                    out_channels: 64,
                    kernel: 16,
                    stride: 8,
                },
                CnnLayerSpec {
                    out_channels: 64,
                    kernel: 40,
                    stride: 40,
                },
            ],
            model_dim: 64,
            num_blocks: 3,
            num_heads: 4,
            ffn_dim: 128,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 64,
            rel_pos_enabled: true,
        }
    }
}

impl BackboneConfig {
    /// A very small setup for gradient checks.
    pub fn tiny() -> Self {
        Self {
            cnn_layers: vec![
                CnnLayerSpec {
                    out_channels: 8,
                    kernel: 6,
                    stride: 4,
                },
                CnnLayerSpec {
                    out_channels: 16,
                    kernel: 4,
                    stride: 4,
                },
            ],
            model_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 24,
            rel_pos_buckets: 8,
            rel_pos_max_distance: 16,
            rel_pos_enabled: true,
        }
    }

    /// A small backbone that keeps the default 320-sample total stride,
    /// for fast desk-scale runs.
    pub fn small() -> Self {
        Self {
            cnn_layers: vec![
                CnnLayerSpec {
                    out_channels: 16,
                    kernel: 16,
                    stride: 8,
                },
                CnnLayerSpec {
                    out_channels: 16,
                    kernel: 40,
                    stride: 40,
                },
            ],
            model_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 24,
            rel_pos_buckets: 8,
            rel_pos_max_distance: 16,
            rel_pos_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_layers.is_empty() {
            return Err(ModelError::Config("no CNN layers".into()));
        }
        if self.cnn_layers.last().unwrap().out_channels != self.model_dim {
            return Err(ModelError::Config(format!(
                "last CNN layer has {} channels, model_dim is {}",
                self.cnn_layers.last().unwrap().out_channels,
                self.model_dim
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.rel_pos_buckets < 4 || self.rel_pos_buckets % 2 != 0 {
            return Err(ModelError::Config(format!(
                "rel_pos_buckets {} must be even and at least 4",
                self.rel_pos_buckets
            )));
        }
        for l in &self.cnn_layers {
            if l.stride == 0 || l.kernel == 0 || l.stride > l.kernel {
                return Err(ModelError::Config(format!(
                    "bad CNN layer {l:?}: need 0 < stride <= kernel"
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn total_stride(&self) -> usize {
        self.cnn_layers.iter().map(|l| l.stride).product()
    }

    /// Receptive field of one output frame in input samples.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1usize;
        let mut stride = 1usize;
        for l in &self.cnn_layers {
            field += (l.kernel - 1) * stride;
            stride *= l.stride;
        }
        field
    }

    /// Output frame count via the stride-chain floor arithmetic.
    pub fn ssl_frames(&self, samples: usize) -> Option<usize> {
        let mut t = samples;
        for l in &self.cnn_layers {
            if t < l.kernel {
                return None;
            }
            t = (t - l.kernel) / l.stride + 1;
        }
        Some(t)
    }
}

struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    rel_bias: ParamId,
    gate_u: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// CNN + transformer encoder with a learned mask embedding.
pub struct Backbone {
    pub cfg: BackboneConfig,
    cnn: Vec<(ParamId, ParamId)>,
    mask_embedding: ParamId,
    blocks: Vec<BlockIds>,
    final_ln: (ParamId, ParamId),
    ordered: Vec<ParamId>,
}

impl Backbone {
    /// Register all backbone parameters under `prefix` and initialize
    /// them from the shared rule.
    pub fn new<T: Real>(
        cfg: BackboneConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ordered = Vec::new();
        let reg = |store: &mut ParamStore<T>,
                       ordered: &mut Vec<ParamId>,
                       name: String,
                       value: ArrayD<T>|
         -> Result<ParamId> {
            let id = store.register(&name, value)?;
            ordered.push(id);
            Ok(id)
        };

        let mut cnn = Vec::new();
        let mut in_ch = 1usize;
        for (i, l) in cfg.cnn_layers.iter().enumerate() {
            let fan_in = in_ch * l.kernel;
            let w = reg(
                store,
                &mut ordered,
                format!("{prefix}.cnn.{i}.weight"),
                uniform_init(rng, &[l.out_channels, in_ch, l.kernel], fan_in),
            )?;
            let b = reg(
                store,
                &mut ordered,
                format!("{prefix}.cnn.{i}.bias"),
                uniform_init(rng, &[l.out_channels], fan_in),
            )?;
            cnn.push((w, b));
            in_ch = l.out_channels;
        }

        let d = cfg.model_dim;
        let mask_embedding = reg(
            store,
            &mut ordered,
            format!("{prefix}.mask_embedding"),
            uniform_init(rng, &[d], d),
        )?;

        let ones = ArrayD::from_elem(IxDyn(&[d]), T::one());
        let zeros = ArrayD::zeros(IxDyn(&[d]));
        let mut blocks = Vec::new();
        for i in 0..cfg.num_blocks {
            let p = format!("{prefix}.block.{i}");
            let ln1 = (
                reg(store, &mut ordered, format!("{p}.ln1.gain"), ones.clone())?,
                reg(store, &mut ordered, format!("{p}.ln1.bias"), zeros.clone())?,
            );
            let wq = reg(store, &mut ordered, format!("{p}.attn.wq"), uniform_init(rng, &[d, d], d))?;
            let bq = reg(store, &mut ordered, format!("{p}.attn.bq"), uniform_init(rng, &[d], d))?;
            let wk = reg(store, &mut ordered, format!("{p}.attn.wk"), uniform_init(rng, &[d, d], d))?;
            let bk = reg(store, &mut ordered, format!("{p}.attn.bk"), uniform_init(rng, &[d], d))?;
            let wv = reg(store, &mut ordered, format!("{p}.attn.wv"), uniform_init(rng, &[d, d], d))?;
            let bv = reg(store, &mut ordered, format!("{p}.attn.bv"), uniform_init(rng, &[d], d))?;
            let wo = reg(store, &mut ordered, format!("{p}.attn.wo"), uniform_init(rng, &[d, d], d))?;
            let bo = reg(store, &mut ordered, format!("{p}.attn.bo"), uniform_init(rng, &[d], d))?;
            let rel_bias = reg(
                store,
                &mut ordered,
                format!("{p}.attn.rel_bias"),
                uniform_init(rng, &[cfg.num_heads, cfg.rel_pos_buckets], cfg.rel_pos_buckets),
            )?;
            let gate_u = reg(
                store,
                &mut ordered,
                format!("{p}.attn.gate_u"),
                uniform_init(rng, &[cfg.num_heads, cfg.head_dim()], cfg.head_dim()),
            )?;
            let ln2 = (
                reg(store, &mut ordered, format!("{p}.ln2.gain"), ones.clone())?,
                reg(store, &mut ordered, format!("{p}.ln2.bias"), zeros.clone())?,
            );
            let w1 = reg(store, &mut ordered, format!("{p}.ffn.w1"), uniform_init(rng, &[d, cfg.ffn_dim], d))?;
            let b1 = reg(store, &mut ordered, format!("{p}.ffn.b1"), uniform_init(rng, &[cfg.ffn_dim], d))?;
            let w2 = reg(store, &mut ordered, format!("{p}.ffn.w2"), uniform_init(rng, &[cfg.ffn_dim, d], cfg.ffn_dim))?;
            let b2 = reg(store, &mut ordered, format!("{p}.ffn.b2"), uniform_init(rng, &[d], cfg.ffn_dim))?;
            blocks.push(BlockIds {
                ln1,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                rel_bias,
                gate_u,
                ln2,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_ln = (
            reg(store, &mut ordered, format!("{prefix}.final_ln.gain"), ones)?,
            reg(store, &mut ordered, format!("{prefix}.final_ln.bias"), zeros)?,
        );
        Ok(Self {
            cfg,
            cnn,
            mask_embedding,
            blocks,
            final_ln,
            ordered,
        })
    }

    pub fn ordered_ids(&self) -> &[ParamId] {
        &self.ordered
    }

    pub fn mask_embedding_id(&self) -> ParamId {
        self.mask_embedding
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: BindMode) -> Binding {
        bind_params(g, store, &self.ordered, mode)
    }

    pub fn bind_arrays<T: Real>(&self, g: &mut Graph<T>, arrays: &[ArrayD<T>]) -> Binding {
        bind_param_arrays(g, &self.ordered, arrays)
    }

    pub fn bind_vars(&self, vars: &[Var]) -> Binding {
        bind_param_vars(&self.ordered, vars)
    }

    /// Strided temporal convolutions with gelu; returns frames x model_dim.
    pub fn cnn_encode<T: Real>(&self, g: &mut Graph<T>, bind: &Binding, wave: Var) -> Result<Var> {
        let mut x = wave; // [1, samples]
        for (i, &(w, b)) in self.cnn.iter().enumerate() {
            let stride = self.cfg.cnn_layers[i].stride;
            let conv = g.conv1d(x, bind.var(w), stride)?;
            let biased = g.add_col_vec(conv, bind.var(b))?;
            x = g.gelu(biased)?;
        }
        Ok(g.transpose(x)?)
    }

    /// Replace masked rows with the learned mask embedding.
    pub fn apply_mask<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        x: Var,
        masked_indices: &[usize],
    ) -> Result<Var> {
        Ok(g.mask_rows(x, bind.var(self.mask_embedding), masked_indices)?)
    }

    /// Pre-norm transformer; returns all block outputs, the last one
    /// passed through the final layer norm (that entry feeds the
    /// objectives).
    pub fn transformer<T: Real>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Vec<Var>> {
        Ok(self.transformer_with_attention(g, bind, x)?.0)
    }

    /// Same as [`Backbone::transformer`] but also returns every
    /// per-(block, head) attention matrix, for diagnostics and tests.
    pub fn transformer_with_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        x: Var,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let frames = g.shape(x)[0];
        let buckets = relative_bucket_matrix(
            frames,
            self.cfg.rel_pos_buckets,
            self.cfg.rel_pos_max_distance,
        );
        let mut outputs = Vec::with_capacity(self.cfg.num_blocks);
        let mut attentions = Vec::new();
        let mut h = x;
        for block in &self.blocks {
            let n1 = g.layernorm(h, bind.var(block.ln1.0), bind.var(block.ln1.1), 1)?;
            let (attn_out, mut probs) = self.attention(g, bind, block, n1, &buckets)?;
            attentions.append(&mut probs);
            let a = g.add(h, attn_out)?;
            let n2 = g.layernorm(a, bind.var(block.ln2.0), bind.var(block.ln2.1), 1)?;
            let h1 = g.matmul(n2, bind.var(block.w1))?;
            let h1 = g.add_row_vec(h1, bind.var(block.b1))?;
            let h1 = g.gelu(h1)?;
            let h2 = g.matmul(h1, bind.var(block.w2))?;
            let h2 = g.add_row_vec(h2, bind.var(block.b2))?;
            h = g.add(a, h2)?;
            outputs.push(h);
        }
        let last = outputs
            .pop()
            .expect("validated config has at least one block");
        let final_h = g.layernorm(last, bind.var(self.final_ln.0), bind.var(self.final_ln.1), 1)?;
        outputs.push(final_h);
        Ok((outputs, attentions))
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        block: &BlockIds,
        x: Var,
        buckets: &Array2<usize>,
    ) -> Result<(Var, Vec<Var>)> {
        let hd = self.cfg.head_dim();
        let q = g.matmul(x, bind.var(block.wq))?;
        let q = g.add_row_vec(q, bind.var(block.bq))?;
        let k = g.matmul(x, bind.var(block.wk))?;
        let k = g.add_row_vec(k, bind.var(block.bk))?;
        let v = g.matmul(x, bind.var(block.wv))?;
        let v = g.add_row_vec(v, bind.var(block.bv))?;

        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.cfg.num_heads);
        let mut probs = Vec::with_capacity(self.cfg.num_heads);
        for head in 0..self.cfg.num_heads {
            let (lo, hi) = (head * hd, (head + 1) * hd);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let mut logits = g.scale(logits, scale)?;
            if self.cfg.rel_pos_enabled {
                let u_row = g.slice(bind.var(block.gate_u), 0, head, head + 1)?;
                let u = g.reshape(u_row, &[hd])?;
                let b_row = g.slice(bind.var(block.rel_bias), 0, head, head + 1)?;
                let b = g.reshape(b_row, &[self.cfg.rel_pos_buckets])?;
                let bias = gated_rel_pos_bias(g, qh, u, b, buckets)?;
                logits = g.add(logits, bias)?;
            }
            let attn = g.softmax(logits, 1)?;
            probs.push(attn);
            head_outs.push(g.matmul(attn, vh)?);
        }
        let mut merged = head_outs[0];
        for &h in &head_outs[1..] {
            merged = g.concat(merged, h, 1)?;
        }
        let out = g.matmul(merged, bind.var(block.wo))?;
        Ok((g.add_row_vec(out, bind.var(block.bo))?, probs))
    }
}

/// Attention-logit bias from key/query offsets: bucketized learned scalars
/// modulated by a query-derived gate, bias[i][j] = (1 + g_i) * b[bucket(j - i)]
/// with g_i = sigmoid(q_i . u).
pub fn gated_rel_pos_bias<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    gate_u: Var,
    bucket_values: Var,
    buckets: &Array2<usize>,
) -> Result<Var> {
    let gate_logits = g.matvec(query, gate_u)?;
    let gate = g.sigmoid(gate_logits)?;
    let one_plus = g.add_scalar(gate, T::one())?;
    let table = g.gather(bucket_values, buckets)?;
    Ok(g.scale_rows(table, one_plus)?)
}

/// Signed log-spaced bucket of a key-query offset, clipped at
/// max_distance. Half the buckets cover each sign; small offsets get
/// exact buckets, larger ones share log-spaced buckets.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let (base, n) = if offset > 0 {
        (half, offset as usize)
    } else {
        (0, (-offset) as usize)
    };
    let max_exact = (half / 2).max(1);
    let bucket = if n < max_exact {
        n
    } else {
        let ratio = (n as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln().max(f64::MIN_POSITIVE);
        let log_bucket = max_exact + (ratio * (half - max_exact) as f64) as usize;
        log_bucket.min(half - 1)
    };
    base + bucket
}

/// offsets[i][j] = j - i, bucketized.
pub fn relative_bucket_matrix(frames: usize, num_buckets: usize, max_distance: usize) -> Array2<usize> {
    Array2::from_shape_fn((frames, frames), |(i, j)| {
        relative_bucket(j as i64 - i as i64, num_buckets, max_distance)
    })
}

// ---------------------------------------------------------------------
// Enhancement head
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnhancementHeadConfig {
    pub recurrent_layers: usize,
    pub hidden_units: usize,
    /// n_bins plus the (duplicated) latent width, or just n_bins for the
    /// baseline without a backbone.
    pub input_dim: usize,
    pub output_bins: usize,
    /// Tie forward/backward weights (and the feature halves of every
    /// matrix consuming bi-directional features). Test configuration:
    /// makes the head exactly equivariant to time reversal.
    pub tied: bool,
}

impl EnhancementHeadConfig {
    pub fn desk_default(input_dim: usize, output_bins: usize) -> Self {
        Self {
            recurrent_layers: 2,
            hidden_units: 128,
            input_dim,
            output_bins,
            tied: false,
        }
    }

    /// The full-scale reference setting: 3 bi-directional layers of 512.
    pub fn reference(input_dim: usize, output_bins: usize) -> Self {
        Self {
            recurrent_layers: 3,
            hidden_units: 512,
            input_dim,
            output_bins,
            tied: false,
        }
    }
}

struct LstmDirIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

/// Bi-directional LSTM stack with a sigmoid mask projection.
///
/// Cell equations per step (i/f/o gates and candidate c~ from one fused
/// affine map z = Wx x_t + Wh h_{t-1} + b, split in quarters):
///   i = sigmoid(z_0), f = sigmoid(z_1), o = sigmoid(z_2), c~ = tanh(z_3)
///   c_t = f * c_{t-1} + i * c~,  h_t = o * tanh(c_t)
pub struct EnhancementHead {
    pub cfg: EnhancementHeadConfig,
    layers: Vec<(LstmDirIds, LstmDirIds)>,
    proj_w: ParamId,
    proj_b: ParamId,
    ordered: Vec<ParamId>,
}

impl EnhancementHead {
    pub fn new<T: Real>(
        cfg: EnhancementHeadConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.recurrent_layers == 0 || cfg.hidden_units == 0 {
            return Err(ModelError::Config("head needs at least one layer and unit".into()));
        }
        let h = cfg.hidden_units;
        let mut ordered = Vec::new();
        let reg = |store: &mut ParamStore<T>,
                       ordered: &mut Vec<ParamId>,
                       name: String,
                       value: ArrayD<T>|
         -> Result<ParamId> {
            let id = store.register(&name, value)?;
            ordered.push(id);
            Ok(id)
        };

        let mut layers = Vec::new();
        for l in 0..cfg.recurrent_layers {
            let in_dim = if l == 0 { cfg.input_dim } else { 2 * h };
            let dir = |store: &mut ParamStore<T>,
                           ordered: &mut Vec<ParamId>,
                           rng: &mut ChaCha8Rng,
                           d: &str|
             -> Result<LstmDirIds> {
                Ok(LstmDirIds {
                    wx: reg(
                        store,
                        ordered,
                        format!("{prefix}.lstm.{l}.{d}.wx"),
                        uniform_init(rng, &[4 * h, in_dim], in_dim),
                    )?,
                    wh: reg(
                        store,
                        ordered,
                        format!("{prefix}.lstm.{l}.{d}.wh"),
                        uniform_init(rng, &[4 * h, h], h),
                    )?,
                    b: reg(
                        store,
                        ordered,
                        format!("{prefix}.lstm.{l}.{d}.b"),
                        uniform_init(rng, &[4 * h], in_dim),
                    )?,
                })
            };
            let fwd = dir(store, &mut ordered, rng, "fwd")?;
            let bwd = dir(store, &mut ordered, rng, "bwd")?;
            layers.push((fwd, bwd));
        }
        let proj_w = reg(
            store,
            &mut ordered,
            format!("{prefix}.proj.weight"),
            uniform_init(rng, &[2 * h, cfg.output_bins], 2 * h),
        )?;
        let proj_b = reg(
            store,
            &mut ordered,
            format!("{prefix}.proj.bias"),
            uniform_init(rng, &[cfg.output_bins], 2 * h),
        )?;

        let head = Self {
            cfg,
            layers,
            proj_w,
            proj_b,
            ordered,
        };
        if head.cfg.tied {
            head.tie_weights(store);
        }
        Ok(head)
    }

    /// Copy forward-direction weights into the backward direction and make
    /// every matrix consuming [fwd; bwd] features symmetric across the
    /// halves, so reversing time reverses the output exactly.
    fn tie_weights<T: Real>(&self, store: &mut ParamStore<T>) {
        let h = self.cfg.hidden_units;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                // Input weights see [fwd; bwd]: mirror the left half.
                let wx = store.value_mut(fwd.wx);
                let mut wx2 = wx.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2-d");
                for r in 0..wx2.nrows() {
                    for c in 0..h {
                        let v = wx2[(r, c)];
                        wx2[(r, c + h)] = v;
                    }
                }
            }
            for (src, dst) in [(fwd.wx, bwd.wx), (fwd.wh, bwd.wh), (fwd.b, bwd.b)] {
                let v = store.get(src).value.clone();
                *store.value_mut(dst) = v;
            }
        }
        // Projection consumes [fwd; bwd]: mirror its row halves.
        let w = store.value_mut(self.proj_w);
        let mut w2 = w.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2-d");
        for r in 0..h {
            for c in 0..w2.ncols() {
                let v = w2[(r, c)];
                w2[(r + h, c)] = v;
            }
        }
    }

    pub fn ordered_ids(&self) -> &[ParamId] {
        &self.ordered
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: BindMode) -> Binding {
        bind_params(g, store, &self.ordered, mode)
    }

    pub fn bind_arrays<T: Real>(&self, g: &mut Graph<T>, arrays: &[ArrayD<T>]) -> Binding {
        bind_param_arrays(g, &self.ordered, arrays)
    }

    pub fn bind_vars(&self, vars: &[Var]) -> Binding {
        bind_param_vars(&self.ordered, vars)
    }

    fn lstm_direction<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        ids: &LstmDirIds,
        x: Var,
    ) -> Result<Var> {
        let h = self.cfg.hidden_units;
        let frames = g.shape(x)[0];
        let in_dim = g.shape(x)[1];
        let wx = bind.var(ids.wx);
        let wh = bind.var(ids.wh);
        let b = bind.var(ids.b);
        let mut hprev = g.input(ArrayD::zeros(IxDyn(&[h])));
        let mut cprev = g.input(ArrayD::zeros(IxDyn(&[h])));
        let mut hs = Vec::with_capacity(frames);
        for t in 0..frames {
            let row = g.gather_rows(x, &[t])?;
            let xt = g.reshape(row, &[in_dim])?;
            let zx = g.matvec(wx, xt)?;
            let zh = g.matvec(wh, hprev)?;
            let z = g.add(zx, zh)?;
            let z = g.add(z, b)?;
            let i_g = g.slice(z, 0, 0, h)?;
            let f_g = g.slice(z, 0, h, 2 * h)?;
            let o_g = g.slice(z, 0, 2 * h, 3 * h)?;
            let c_cand = g.slice(z, 0, 3 * h, 4 * h)?;
            let i_g = g.sigmoid(i_g)?;
            let f_g = g.sigmoid(f_g)?;
            let o_g = g.sigmoid(o_g)?;
            let c_cand = g.tanh(c_cand)?;
            let keep = g.mul(f_g, cprev)?;
            let write = g.mul(i_g, c_cand)?;
            let c = g.add(keep, write)?;
            let c_act = g.tanh(c)?;
            let hnew = g.mul(o_g, c_act)?;
            hs.push(hnew);
            hprev = hnew;
            cprev = c;
        }
        Ok(g.stack_rows(&hs)?)
    }

    /// Run the stacked bi-directional layers plus sigmoid projection on an
    /// already-concatenated input, returning a per-bin mask in (0, 1).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &Binding, input: Var) -> Result<Var> {
        let in_dim = g.shape(input)[1];
        if in_dim != self.cfg.input_dim {
            return Err(ModelError::Config(format!(
                "head expects input_dim {}, got {}",
                self.cfg.input_dim, in_dim
            )));
        }
        let mut x = input;
        for (fwd, bwd) in &self.layers {
            let f = self.lstm_direction(g, bind, fwd, x)?;
            let rev = g.reverse_rows(x)?;
            let b_rev = self.lstm_direction(g, bind, bwd, rev)?;
            let b = g.reverse_rows(b_rev)?;
            x = g.concat(f, b, 1)?;
        }
        let logits = g.matmul(x, bind.var(self.proj_w))?;
        let logits = g.add_row_vec(logits, bind.var(self.proj_b))?;
        Ok(g.sigmoid(logits)?)
    }
}

/// Concatenate noisy magnitude with the duplicated SSL latent and run the
/// head. Frame counts must already agree.
pub fn enhancement_forward<T: Real>(
    g: &mut Graph<T>,
    head: &EnhancementHead,
    bind: &Binding,
    noisy_mag: Var,
    ssl_latent_dup: Option<Var>,
) -> Result<Var> {
    let input = match ssl_latent_dup {
        Some(latent) => {
            let mag_frames = g.shape(noisy_mag)[0];
            let latent_frames = g.shape(latent)[0];
            if mag_frames != latent_frames {
                return Err(ModelError::FrameMismatch {
                    mag_frames,
                    latent_frames,
                });
            }
            g.concat(noisy_mag, latent, 1)?
        }
        None => noisy_mag,
    };
    head.forward(g, bind, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn wave_input(g: &mut Graph<f64>, samples: &[f64]) -> Var {
        let arr = Array2::from_shape_vec((1, samples.len()), samples.to_vec()).unwrap();
        g.input(arr.into_dyn())
    }

    #[test]
    fn cnn_frame_count_matches_receptive_field_formula() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f64>::new();
        let backbone = Backbone::new(cfg.clone(), "backbone", &mut store, &mut rng(1)).unwrap();
        let samples = 16000usize;
        let expected = (samples - cfg.receptive_field()) / cfg.total_stride() + 1;
        assert_eq!(cfg.ssl_frames(samples), Some(expected));

        let mut g = Graph::<f64>::new();
        let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
        let wave: Vec<f64> = (0..samples).map(|i| (i as f64 * 0.01).sin() * 0.1).collect();
        let x = wave_input(&mut g, &wave);
        let feats = backbone.cnn_encode(&mut g, &bind, x).unwrap();
        assert_eq!(g.shape(feats), vec![expected, cfg.model_dim]);
    }

    #[test]
    fn zero_input_yields_identical_frames() {
        let mut store = ParamStore::<f64>::new();
        let backbone =
            Backbone::new(BackboneConfig::tiny(), "backbone", &mut store, &mut rng(2)).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
        let x = wave_input(&mut g, &vec![0.0; 400]);
        let feats = backbone.cnn_encode(&mut g, &bind, x).unwrap();
        let m = g.value(feats).clone();
        for r in 0..m.shape()[0] {
            for c in 0..m.shape()[1] {
                assert_eq!(m[[r, c]], m[[0, c]], "row {r}");
            }
        }
    }

    #[test]
    fn periodic_input_repeats_frames_when_doubled() {
        let cfg = BackboneConfig::tiny();
        let stride = cfg.total_stride();
        let mut store = ParamStore::<f64>::new();
        let backbone = Backbone::new(cfg, "backbone", &mut store, &mut rng(3)).unwrap();
        let period_wave = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| 0.2 * ((i % stride) as f64 / stride as f64 * std::f64::consts::TAU).sin())
                .collect()
        };
        let run = |samples: &[f64]| {
            let mut g = Graph::<f64>::new();
            let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
            let x = wave_input(&mut g, samples);
            let feats = backbone.cnn_encode(&mut g, &bind, x).unwrap();
            g.value(feats).clone()
        };
        let short = run(&period_wave(stride * 20));
        let long = run(&period_wave(stride * 40));
        // Period equals the total stride, so every frame sees the same
        // window content; doubling the input repeats the interior frames.
        for r in 0..short.shape()[0] {
            for c in 0..short.shape()[1] {
                assert!((long[[r, c]] - short[[r, c]]).abs() < 1e-12);
            }
        }
        for r in 0..long.shape()[0] {
            for c in 0..long.shape()[1] {
                assert!((long[[r, c]] - long[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_mask_replaces_exactly_the_masked_rows() {
        let mut store = ParamStore::<f64>::new();
        let backbone =
            Backbone::new(BackboneConfig::tiny(), "backbone", &mut store, &mut rng(4)).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
        let x_arr = Array2::from_shape_fn((6, 16), |(i, j)| (i * 17 + j) as f64 * 0.01);
        let x = g.input(x_arr.clone().into_dyn());

        let empty = backbone.apply_mask(&mut g, &bind, x, &[]).unwrap();
        assert_eq!(g.value(empty), g.value(x));

        let all: Vec<usize> = (0..6).collect();
        let full = backbone.apply_mask(&mut g, &bind, x, &all).unwrap();
        let emb = store.get(backbone.mask_embedding_id()).value.clone();
        for r in 0..6 {
            for c in 0..16 {
                assert_eq!(g.value(full)[[r, c]], emb[[c]]);
            }
        }

        let some = backbone.apply_mask(&mut g, &bind, x, &[1, 4]).unwrap();
        for r in [0usize, 2, 3, 5] {
            for c in 0..16 {
                assert_eq!(
                    g.value(some)[[r, c]].to_bits(),
                    x_arr[(r, c)].to_bits(),
                    "unmasked row {r} must be bit-identical"
                );
            }
        }

        assert!(backbone.apply_mask(&mut g, &bind, x, &[6]).is_err());
    }

    #[test]
    fn single_frame_attention_is_finite_with_right_shape() {
        let mut store = ParamStore::<f64>::new();
        let backbone =
            Backbone::new(BackboneConfig::tiny(), "backbone", &mut store, &mut rng(5)).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
        let x = g.input(Array2::from_shape_fn((1, 16), |(_, j)| 0.1 * j as f64).into_dyn());
        let outs = backbone.transformer(&mut g, &bind, x).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(g.shape(outs[1]), vec![1, 16]);
        assert!(g.value(outs[1]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_rows_sum_to_one_with_and_without_bias() {
        for enabled in [true, false] {
            let mut cfg = BackboneConfig::tiny();
            cfg.rel_pos_enabled = enabled;
            let mut store = ParamStore::<f64>::new();
            let backbone = Backbone::new(cfg, "backbone", &mut store, &mut rng(6)).unwrap();
            let mut g = Graph::<f64>::new();
            let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
            let x = g.input(
                Array2::from_shape_fn((7, 16), |(i, j)| ((i + j) as f64).sin() * 0.3).into_dyn(),
            );
            let (_, attns) = backbone
                .transformer_with_attention(&mut g, &bind, x)
                .unwrap();
            assert!(!attns.is_empty());
            for a in attns {
                let m = g.value(a);
                let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                for row in m2.rows() {
                    let s: f64 = row.sum();
                    assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
                }
            }
        }
    }

    #[test]
    fn permuting_frames_without_bias_permutes_outputs() {
        let mut cfg = BackboneConfig::tiny();
        cfg.rel_pos_enabled = false;
        let mut store = ParamStore::<f64>::new();
        let backbone = Backbone::new(cfg, "backbone", &mut store, &mut rng(7)).unwrap();
        let x_arr = Array2::from_shape_fn((5, 16), |(i, j)| ((i * 31 + j) as f64 * 0.07).sin());
        let mut swapped = x_arr.clone();
        for c in 0..16 {
            let a = swapped[(1, c)];
            swapped[(1, c)] = swapped[(3, c)];
            swapped[(3, c)] = a;
        }
        let run = |arr: &Array2<f64>| {
            let mut g = Graph::<f64>::new();
            let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
            let x = g.input(arr.clone().into_dyn());
            let outs = backbone.transformer(&mut g, &bind, x).unwrap();
            g.value(*outs.last().unwrap()).clone()
        };
        let base = run(&x_arr);
        let perm = run(&swapped);
        for c in 0..16 {
            assert!((base[[1, c]] - perm[[3, c]]).abs() < 1e-9);
            assert!((base[[3, c]] - perm[[1, c]]).abs() < 1e-9);
            assert!((base[[0, c]] - perm[[0, c]]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gate_vector_gives_three_halves_of_bucket_value() {
        let mut g = Graph::<f64>::new();
        let frames = 5;
        let hd = 4;
        let nb = 8;
        let q = g.input(
            Array2::from_shape_fn((frames, hd), |(i, j)| (i + j) as f64 * 0.1).into_dyn(),
        );
        let u = g.input(Array1::<f64>::zeros(hd).into_dyn());
        let b_arr = Array1::from_shape_fn(nb, |k| 0.5 + k as f64);
        let b = g.input(b_arr.clone().into_dyn());
        let buckets = relative_bucket_matrix(frames, nb, 16);
        let bias = gated_rel_pos_bias(&mut g, q, u, b, &buckets).unwrap();
        let m = g.value(bias);
        for i in 0..frames {
            for j in 0..frames {
                let expect = 1.5 * b_arr[buckets[(i, j)]];
                assert!((m[[i, j]] - expect).abs() < 1e-12);
                for j2 in 0..frames {
                    if buckets[(i, j2)] == buckets[(i, j)] {
                        assert_eq!(m[[i, j2]], m[[i, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn bucket_function_is_signed_and_clipped() {
        let nb = 32;
        let maxd = 64;
        assert_eq!(relative_bucket(0, nb, maxd), 0);
        assert_ne!(relative_bucket(-1, nb, maxd), relative_bucket(1, nb, maxd));
        let far = relative_bucket(1000, nb, maxd);
        assert_eq!(far, relative_bucket(5000, nb, maxd));
        assert!(far < nb);
        let mut prev = 0;
        for off in 1..200 {
            let b = relative_bucket(off, nb, maxd);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn head_outputs_open_unit_interval_mask_of_right_shape() {
        let mut store = ParamStore::<f64>::new();
        let cfg = EnhancementHeadConfig {
            recurrent_layers: 2,
            hidden_units: 12,
            input_dim: 20,
            output_bins: 9,
            tied: false,
        };
        let head = EnhancementHead::new(cfg, "head", &mut store, &mut rng(8)).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = head.bind(&mut g, &store, BindMode::Frozen);
        let mag = g.input(
            Array2::from_shape_fn((11, 9), |(i, j)| ((i * j) as f64 * 0.03).cos().abs()).into_dyn(),
        );
        let latent = g.input(
            Array2::from_shape_fn((11, 11), |(i, j)| ((i + 2 * j) as f64 * 0.05).sin()).into_dyn(),
        );
        let mask = enhancement_forward(&mut g, &head, &bind, mag, Some(latent)).unwrap();
        assert_eq!(g.shape(mask), vec![11, 9]);
        for &v in g.value(mask).iter() {
            assert!(v > 0.0 && v < 1.0, "mask value {v} saturated");
        }

        let short = g.input(Array2::from_shape_fn((10, 11), |_| 0.1).into_dyn());
        assert!(matches!(
            enhancement_forward(&mut g, &head, &bind, mag, Some(short)),
            Err(ModelError::FrameMismatch {
                mag_frames: 11,
                latent_frames: 10
            })
        ));
    }

    #[test]
    fn tied_head_reverses_output_when_input_reverses() {
        let mut store = ParamStore::<f64>::new();
        let cfg = EnhancementHeadConfig {
            recurrent_layers: 2,
            hidden_units: 10,
            input_dim: 6,
            output_bins: 6,
            tied: true,
        };
        let head = EnhancementHead::new(cfg, "head", &mut store, &mut rng(9)).unwrap();
        let x_arr = Array2::from_shape_fn((9, 6), |(i, j)| ((i * 7 + j) as f64 * 0.11).sin());
        let run = |arr: &Array2<f64>| {
            let mut g = Graph::<f64>::new();
            let bind = head.bind(&mut g, &store, BindMode::Frozen);
            let x = g.input(arr.clone().into_dyn());
            let y = head.forward(&mut g, &bind, x).unwrap();
            g.value(y).clone()
        };
        let fwd = run(&x_arr);
        let rev_in = x_arr.slice(ndarray::s![..;-1, ..]).to_owned();
        let rev = run(&rev_in);
        for i in 0..9 {
            for j in 0..6 {
                assert!(
                    (fwd[[i, j]] - rev[[8 - i, j]]).abs() < 1e-12,
                    "({i},{j}): {} vs {}",
                    fwd[[i, j]],
                    rev[[8 - i, j]]
                );
            }
        }
    }

    #[test]
    fn forward_pass_is_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let backbone =
            Backbone::new(BackboneConfig::tiny(), "backbone", &mut store, &mut rng(10)).unwrap();
        let wave: Vec<f64> = (0..600).map(|i| (i as f64 * 0.1).sin() * 0.2).collect();
        let run = || {
            let mut g = Graph::<f64>::new();
            let bind = backbone.bind(&mut g, &store, BindMode::Frozen);
            let x = wave_input(&mut g, &wave);
            let feats = backbone.cnn_encode(&mut g, &bind, x).unwrap();
            let masked = backbone.apply_mask(&mut g, &bind, feats, &[2, 3]).unwrap();
            let outs = backbone.transformer(&mut g, &bind, masked).unwrap();
            g.value(*outs.last().unwrap()).clone()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
