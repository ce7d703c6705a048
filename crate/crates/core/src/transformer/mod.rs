//! GPT-2 style decoder-only transformer at desk scale.
//!
//! Pre-LayerNorm blocks, learned positional embeddings, GELU MLP of width `4 * dim`
//! and an output head tied to the token embedding. A tree batch is decoded by
//! splitting attention into cross-attention over the cached prefix and masked
//! self-attention inside the batch; each node's positional embedding index is
//! `prefix_len + depth`.

mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_batch, KvCache, LanguageModel, LayerKv, ModelCost, ModelState, Scratch};
use crate::sampling::LogitVector;
use crate::tree::TreeBatch;
use crate::vocab::TokenId;

pub use weights::{WEIGHTS_MAGIC, WEIGHTS_VERSION};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_context: usize,
    pub vocab_size: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let TransformerConfig { layers, heads, dim, max_context, vocab_size } = *self;
        if layers == 0 || heads == 0 || dim == 0 || max_context == 0 || vocab_size == 0 {
            return Err(Error::InvalidConfig(format!("all dimensions must be positive: {self:?}")));
        }
        if dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        tensor_layout(self).iter().map(|t| t.numel()).sum()
    }
}

/// Name and shape of one parameter tensor, with its offset (in floats) into the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Canonical tensor directory for a config.
pub fn tensor_layout(config: &TransformerConfig) -> Vec<TensorInfo> {
    let d = config.dim;
    let mut specs: Vec<(String, Vec<usize>)> = vec![
        ("wte".into(), vec![config.vocab_size, d]),
        ("wpe".into(), vec![config.max_context, d]),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("h{l}.{s}");
        specs.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.w"), vec![d, 3 * d]),
            (p("attn.b"), vec![3 * d]),
            (p("proj.w"), vec![d, d]),
            (p("proj.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("fc.w"), vec![d, 4 * d]),
            (p("fc.b"), vec![4 * d]),
            (p("out.w"), vec![4 * d, d]),
            (p("out.b"), vec![d]),
        ]);
    }
    specs.extend([("lnf.g".into(), vec![d]), ("lnf.b".into(), vec![d])]);
    let mut offset = 0;
    specs
        .into_iter()
        .map(|(name, shape)| {
            let info = TensorInfo { name, offset, shape };
            offset += info.numel();
            info
        })
        .collect()
}

/// Parameters of the random initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Standard deviation of every weight matrix.
    pub std: f32,
    /// Standard deviation of the token and position embeddings.
    pub embed_std: f32,
    /// Multiple of the identity added to every attention value and output
    /// projection. With near-uniform attention this feeds each position the mean
    /// embedding of its context, so the tied head favours tokens already seen.
    pub copy_gain: f32,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { std: 0.02, embed_std: 0.02, copy_gain: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    attn_w: usize,
    attn_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Pre- and post-softmax attention scores among batch nodes, per layer and head.
///
/// `scores[layer][head][i * n + j]` is the scaled dot product between node `i`'s
/// query and node `j`'s key, or negative infinity when `j` is masked for `i`.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub scores: Vec<Vec<Vec<f32>>>,
    pub weights: Vec<Vec<Vec<f32>>>,
}

/// An immutable transformer.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    params: Vec<f32>,
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
}

impl Transformer {
    /// Wrap a flat parameter vector laid out per [`tensor_layout`].
    pub fn from_params(config: TransformerConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config);
        let expected: usize = layout.iter().map(|t| t.numel()).sum();
        if params.len() != expected {
            return Err(Error::CorruptWeights(format!(
                "expected {expected} parameters, found {}",
                params.len()
            )));
        }
        let off = |name: &str| layout.iter().find(|t| t.name == name).map(|t| t.offset).unwrap();
        let blocks = (0..config.layers)
            .map(|l| {
                let o = |s: &str| off(&format!("h{l}.{s}"));
                BlockOffsets {
                    ln1_g: o("ln1.g"),
                    ln1_b: o("ln1.b"),
                    attn_w: o("attn.w"),
                    attn_b: o("attn.b"),
                    proj_w: o("proj.w"),
                    proj_b: o("proj.b"),
                    ln2_g: o("ln2.g"),
                    ln2_b: o("ln2.b"),
                    fc_w: o("fc.w"),
                    fc_b: o("fc.b"),
                    out_w: o("out.w"),
                    out_b: o("out.b"),
                }
            })
            .collect();
        Ok(Transformer {
            config,
            wte: off("wte"),
            wpe: off("wpe"),
            blocks,
            lnf_g: off("lnf.g"),
            lnf_b: off("lnf.b"),
            params,
        })
    }

    /// Deterministic random weights: normal(0, 0.02) matrices, zero biases, unit norms.
    pub fn init_random(config: TransformerConfig, seed: u64) -> Result<Self> {
        Self::init_random_with(config, InitOptions::default(), seed)
    }

    pub fn init_random_with(config: TransformerConfig, opts: InitOptions, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Normal::new(0.0f32, opts.std)
            .map_err(|e| Error::InvalidArgument(format!("init std: {e}")))?;
        let embed = Normal::new(0.0f32, opts.embed_std)
            .map_err(|e| Error::InvalidArgument(format!("init embed std: {e}")))?;
        let mut params = Vec::with_capacity(config.param_count());
        for t in tensor_layout(&config) {
            let n = t.numel();
            if t.name == "wte" || t.name == "wpe" {
                params.extend((0..n).map(|_| embed.sample(&mut rng)));
            } else if t.name.ends_with(".g") {
                params.extend(std::iter::repeat_n(1.0f32, n));
            } else if t.name.ends_with(".b") {
                params.extend(std::iter::repeat_n(0.0f32, n));
            } else {
                let start = params.len();
                params.extend((0..n).map(|_| weight.sample(&mut rng)));
                if opts.copy_gain != 0.0 {
                    let d = config.dim;
                    let w = &mut params[start..];
                    if t.name.ends_with("attn.w") {
                        (0..d).for_each(|i| w[i * 3 * d + 2 * d + i] += opts.copy_gain);
                    } else if t.name.ends_with("proj.w") {
                        (0..d).for_each(|i| w[i * d + i] += opts.copy_gain);
                    }
                }
            }
        }
        Self::from_params(config, params)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slice(&self, offset: usize, len: usize) -> &[f32] {
        &self.params[offset..offset + len]
    }

    fn embed(&self, token: TokenId, position: usize) -> Vec<f32> {
        let d = self.config.dim;
        let te = self.slice(self.wte + token.index() * d, d);
        let pe = self.slice(self.wpe + position * d, d);
        te.iter().zip(pe).map(|(a, b)| a + b).collect()
    }

    fn head_logits(&self, x: &[f32]) -> Vec<f32> {
        let d = self.config.dim;
        let mut h = x.to_vec();
        layer_norm(&mut h, self.slice(self.lnf_g, d), self.slice(self.lnf_b, d));
        let wte = self.slice(self.wte, self.config.vocab_size * d);
        wte.chunks_exact(d).map(|row| dot(row, &h)).collect()
    }

    /// Query, key, value projections of one (already normalized) row.
    fn qkv(&self, b: &BlockOffsets, h: &[f32]) -> Vec<f32> {
        let d = self.config.dim;
        linear(h, self.slice(b.attn_w, d * 3 * d), self.slice(b.attn_b, 3 * d))
    }

    /// Attention output projection and MLP, applied in place to residual row `x`.
    fn finish_block(&self, b: &BlockOffsets, x: &mut [f32], attn: &[f32]) {
        let d = self.config.dim;
        let proj = linear(attn, self.slice(b.proj_w, d * d), self.slice(b.proj_b, d));
        add_assign(x, &proj);
        let mut h = x.to_vec();
        layer_norm(&mut h, self.slice(b.ln2_g, d), self.slice(b.ln2_b, d));
        let mut m = linear(&h, self.slice(b.fc_w, d * 4 * d), self.slice(b.fc_b, 4 * d));
        m.iter_mut().for_each(|v| *v = gelu(*v));
        let out = linear(&m, self.slice(b.out_w, 4 * d * d), self.slice(b.out_b, d));
        add_assign(x, &out);
    }

    /// Reference single-token decode: appends one cache row and returns the logits.
    pub fn forward_sequential(&self, state: &mut ModelState, token: TokenId) -> Result<LogitVector> {
        let pos = state.len();
        if pos >= self.config.max_context {
            return Err(Error::ContextOverflow { position: pos, max_context: self.config.max_context });
        }
        if token.index() >= self.config.vocab_size {
            return Err(Error::InvalidArgument(format!("token {token} outside vocabulary")));
        }
        let d = self.config.dim;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x = self.embed(token, pos);
        for (l, b) in self.blocks.iter().enumerate() {
            let mut h = x.clone();
            layer_norm(&mut h, self.slice(b.ln1_g, d), self.slice(b.ln1_b, d));
            let qkv = self.qkv(b, &h);
            let (q, kv) = qkv.split_at(d);
            let (k, v) = kv.split_at(d);
            state.cache_mut().push_layer_row(l, k, v);
            let layer = state.cache().layer(l);
            let rows = pos + 1;
            let mut attn = vec![0.0f32; d];
            let mut scores = vec![0.0f32; rows];
            for head in 0..self.config.heads {
                let r = head * hd..(head + 1) * hd;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[r.clone()], &layer.keys[j * d + r.start..j * d + r.end]) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[r.clone()];
                for (j, &w) in scores.iter().enumerate() {
                    axpy(out, w, &layer.values[j * d + r.start..j * d + r.end]);
                }
            }
            self.finish_block(b, &mut x, &attn);
        }
        state.cache_mut().finish_row();
        let logits = LogitVector::from_f32(&self.head_logits(&x));
        state.push_token(token, logits.clone());
        Ok(logits)
    }

    /// Decode a tree batch and also return per-layer attention scores among batch nodes.
    pub fn forward_tree_traced(
        &self,
        state: &mut ModelState,
        batch: &TreeBatch,
    ) -> Result<(Vec<LogitVector>, AttentionTrace)> {
        let mut trace = AttentionTrace::default();
        let logits = self.forward_tree_impl(state, batch, Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn forward_tree_impl(
        &self,
        state: &mut ModelState,
        batch: &TreeBatch,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Vec<LogitVector>> {
        check_batch(self, state, batch)?;
        let d = self.config.dim;
        let hd = self.config.head_dim();
        let heads = self.config.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let n = batch.len();
        let prefix = state.len();

        let mut xs: Vec<Vec<f32>> = batch
            .tokens()
            .iter()
            .zip(batch.positions())
            .map(|(&t, &p)| self.embed(t, p))
            .collect();
        let mut scratch_layers = Vec::with_capacity(self.blocks.len());

        for (l, b) in self.blocks.iter().enumerate() {
            let mut keys = Vec::with_capacity(n * d);
            let mut values = Vec::with_capacity(n * d);
            let mut queries = Vec::with_capacity(n * d);
            for x in &xs {
                let mut h = x.clone();
                layer_norm(&mut h, self.slice(b.ln1_g, d), self.slice(b.ln1_b, d));
                let qkv = self.qkv(b, &h);
                queries.extend_from_slice(&qkv[..d]);
                keys.extend_from_slice(&qkv[d..2 * d]);
                values.extend_from_slice(&qkv[2 * d..]);
            }
            let cached = state.cache().layer(l);
            let mut layer_scores = vec![vec![f32::NEG_INFINITY; n * n]; if trace.is_some() { heads } else { 0 }];
            let mut layer_weights = vec![vec![0.0f32; n * n]; if trace.is_some() { heads } else { 0 }];
            let mut scores = vec![0.0f32; prefix + n];
            for i in 0..n {
                let q = &queries[i * d..(i + 1) * d];
                let mut attn = vec![0.0f32; d];
                for head in 0..heads {
                    let r = head * hd..(head + 1) * hd;
                    // cross-attention over the cached prefix, then masked self-attention
                    for (j, s) in scores[..prefix].iter_mut().enumerate() {
                        *s = dot(&q[r.clone()], &cached.keys[j * d + r.start..j * d + r.end]) * scale;
                    }
                    for j in 0..n {
                        scores[prefix + j] = if batch.attends(i, j) {
                            dot(&q[r.clone()], &keys[j * d + r.start..j * d + r.end]) * scale
                        } else {
                            f32::NEG_INFINITY
                        };
                    }
                    if trace.is_some() {
                        layer_scores[head][i * n..(i + 1) * n].copy_from_slice(&scores[prefix..]);
                    }
                    softmax_in_place(&mut scores);
                    if trace.is_some() {
                        layer_weights[head][i * n..(i + 1) * n].copy_from_slice(&scores[prefix..]);
                    }
                    let out = &mut attn[r.clone()];
                    for (j, &w) in scores[..prefix].iter().enumerate() {
                        axpy(out, w, &cached.values[j * d + r.start..j * d + r.end]);
                    }
                    for j in 0..n {
                        if batch.attends(i, j) {
                            axpy(out, scores[prefix + j], &values[j * d + r.start..j * d + r.end]);
                        }
                    }
                }
                self.finish_block(b, &mut xs[i], &attn);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.scores.push(layer_scores);
                t.weights.push(layer_weights);
            }
            scratch_layers.push(LayerKv { keys, values });
        }

        let logits: Vec<LogitVector> =
            xs.iter().map(|x| LogitVector::from_f32(&self.head_logits(x))).collect();
        state.store_scratch(Scratch {
            batch: batch.clone(),
            cache: KvCache::from_layers(scratch_layers, d),
            logits: logits.clone(),
        });
        Ok(logits)
    }
}

impl LanguageModel for Transformer {
    fn name(&self) -> String {
        let c = &self.config;
        format!("transformer(L={},H={},D={},N={})", c.layers, c.heads, c.dim, c.max_context)
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn cost(&self) -> ModelCost {
        ModelCost { param_bytes: 4 * self.params.len() as u64 }
    }

    fn new_state(&self) -> ModelState {
        ModelState::new(KvCache::with_capacity(
            self.config.layers,
            self.config.dim,
            self.config.max_context.min(1024),
        ))
    }

    fn decode_tree(&self, state: &mut ModelState, batch: &TreeBatch) -> Result<Vec<LogitVector>> {
        self.forward_tree_impl(state, batch, None)
    }
}

impl KvCache {
    pub(crate) fn from_layers(layers: Vec<LayerKv>, width: usize) -> Self {
        let len = layers.first().map(|l| l.keys.len() / width).unwrap_or(0);
        let mut cache = KvCache::new(0, width);
        cache.replace_layers(layers, len);
        cache
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f32], w: f32, x: &[f32]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += w * v);
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// `x @ w + b` with `w` row-major `[in, out]`.
fn linear(x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let out_dim = b.len();
    let mut out = b.to_vec();
    for (xi, row) in x.iter().zip(w.chunks_exact(out_dim)) {
        axpy(&mut out, *xi, row);
    }
    out
}

fn layer_norm(x: &mut [f32], g: &[f32], b: &[f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for ((v, g), b) in x.iter_mut().zip(g).zip(b) {
        *v = (*v - mean) * inv * g + b;
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_in_place(s: &mut [f32]) {
    let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in s.iter_mut() {
        *v /= sum;
    }
}
