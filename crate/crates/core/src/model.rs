//! Decoder-only transformer with switchable attention masking.
//!
//! Architecture: learned token and position embeddings, pre-layer-norm
//! residual blocks (multi-head self-attention, GELU feed-forward), a final
//! layer norm, and an output head tied to the token embedding. In
//! bidirectional mode every position attends to every position of the
//! sequence, PAD included; causal mode restricts position `i` to `j ≤ i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, AttentionShape, Graph, Scalar, Tensor, Var, LAYER_NORM_EPS};
use crate::tokenizer::PAD;

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Bidirectional,
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    /// Desk-scale model sized for 512-token prefixes and 114-slot target buffers.
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab: crate::tokenizer::BYTE_VOCAB_SIZE,
            max_seq: 512 + 114,
            attention: AttentionMode::Bidirectional,
        }
    }
}

impl ModelConfig {
    /// The 12-layer, 768-wide reference shape.
    pub fn reference_scale(vocab: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab,
            max_seq: 512 + 114,
            attention: AttentionMode::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab == 0 {
            return fail("vocab must be positive".into());
        }
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.max_seq == 0 {
            return fail(format!("all model dimensions must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab > u32::MAX as usize {
            return fail("vocab exceeds u32 id space".into());
        }
        Ok(())
    }

    /// Parameter names and shapes in allocation order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden, self.ffn);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab, d]),
            ("pos_emb".to_string(), vec![self.max_seq, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        out
    }
}

/// Closed-form parameter count.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let (v, s, d, f) = (config.vocab, config.max_seq, config.hidden, config.ffn);
    let per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
    Ok(v * d + s * d + config.layers * per_layer + 2 * d)
}

const PER_LAYER: usize = 16;
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

/// Offsets of one layer's tensors relative to the layer base index.
mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;
}

/// All learnable tensors of a model, in [`ModelConfig::param_layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let (names, tensors) = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".gamma") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                };
                let t = Tensor::new(shape, data).expect("layout shapes are consistent");
                (name, t)
            })
            .unzip();
        Ok(Self { config: config.clone(), names, tensors })
    }

    /// Assembles parameters from named tensors, checking names and shapes against the layout.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        let mut diffs = Vec::new();
        if named.len() != layout.len() {
            diffs.push(format!("expected {} tensors, found {}", layout.len(), named.len()));
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            match named.binary_search_by(|(n, _)| n.as_str().cmp(name)) {
                Ok(i) if named[i].1.shape() == shape.as_slice() => tensors.push(named[i].1.clone()),
                Ok(i) => diffs.push(format!("{name}: expected shape {shape:?}, found {:?}", named[i].1.shape())),
                Err(_) => diffs.push(format!("{name}: missing")),
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Mismatch(diffs.join("\n")));
        }
        Ok(Self {
            config: config.clone(),
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// View of these parameters that runs with an explicit attention mode.
    pub fn with_mode(&self, mode: AttentionMode) -> Transformer<'_, T> {
        Transformer { params: self, mode }
    }
}

/// A model that maps token ids to per-position logits on a gradient tape.
pub trait Denoiser<T: Scalar> {
    fn vocab_size(&self) -> usize;

    /// Longest sequence the model accepts, if bounded.
    fn max_seq(&self) -> Option<usize> {
        None
    }

    /// Logits `[batch*seq × vocab]` for row-major `ids` of shape `[batch × seq]`.
    fn logits(&self, graph: &mut Graph<T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var>;

    /// The same logits without recording anything for a backward pass.
    fn infer(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.logits(&mut g, ids, batch, seq)?;
        Ok(g.value(out).clone())
    }
}

/// [`ModelParams`] paired with the attention mode to run it in.
#[derive(Clone, Copy, Debug)]
pub struct Transformer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub mode: AttentionMode,
}

impl<T: Scalar> Denoiser<T> for Transformer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab
    }

    fn max_seq(&self) -> Option<usize> {
        Some(self.params.config.max_seq)
    }

    fn logits(&self, graph: &mut Graph<T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        transformer_logits(self.params, self.mode, graph, ids, batch, seq)
    }

    fn infer(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        infer_logits(self.params, self.mode, ids, batch, seq)
    }
}

impl<T: Scalar> Denoiser<T> for ModelParams<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn max_seq(&self) -> Option<usize> {
        Some(self.config.max_seq)
    }

    fn logits(&self, graph: &mut Graph<T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        transformer_logits(self, self.config.attention, graph, ids, batch, seq)
    }

    fn infer(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        infer_logits(self, self.config.attention, ids, batch, seq)
    }
}

/// Adapts a plain function into a [`Denoiser`] without parameters.
///
/// `f(row, ids)` receives the batch row index and that row's ids and returns
/// row-major logits `[ids.len() × vocab]`.
pub struct FnDenoiser<F> {
    pub vocab: usize,
    pub f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(usize, &[u32]) -> Vec<f64>,
{
    pub fn new(vocab: usize, f: F) -> Self {
        Self { vocab, f }
    }
}

impl<T: Scalar, F> Denoiser<T> for FnDenoiser<F>
where
    F: Fn(usize, &[u32]) -> Vec<f64>,
{
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn logits(&self, graph: &mut Graph<T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        if ids.len() != batch * seq {
            return Err(Error::shape("logits", format!("{} ids for batch {batch} x seq {seq}", ids.len())));
        }
        let mut data = Vec::with_capacity(ids.len() * self.vocab);
        for (r, row) in ids.chunks(seq.max(1)).enumerate().take(batch) {
            let logits = (self.f)(r, row);
            if logits.len() != seq * self.vocab {
                return Err(Error::shape("logits", format!("function returned {} values for {seq} positions", logits.len())));
            }
            data.extend(logits.into_iter().map(T::from_f64));
        }
        Ok(graph.constant(Tensor::new([batch * seq, self.vocab], data)?))
    }
}

fn transformer_logits<T: Scalar>(
    params: &ModelParams<T>,
    mode: AttentionMode,
    g: &mut Graph<T>,
    ids: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let cfg = &params.config;
    check_input(cfg, ids, batch, seq)?;
    let p = |g: &mut Graph<T>, i: usize| g.param(i, &params.tensors[i]);

    let tok_table = p(g, TOK_EMB);
    let pos_table = p(g, POS_EMB);
    let tok = g.embedding(tok_table, ids)?;
    let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
    let pos = g.embedding(pos_table, &positions)?;
    let mut h = g.add(tok, pos)?;

    let shape = AttentionShape {
        batch,
        seq,
        heads: cfg.heads,
        causal: mode == AttentionMode::Causal,
    };
    for l in 0..cfg.layers {
        let base = 2 + l * PER_LAYER;
        let w = |g: &mut Graph<T>, s: usize| g.param(base + s, &params.tensors[base + s]);

        let (g1, b1) = (w(g, slot::LN1_G), w(g, slot::LN1_B));
        let a = g.layer_norm(h, g1, b1, LAYER_NORM_EPS)?;
        let proj = |g: &mut Graph<T>, wi: usize, bi: usize| -> Result<Var> {
            let (wv, bv) = (w(g, wi), w(g, bi));
            let y = g.matmul(a, wv)?;
            g.add_bias(y, bv)
        };
        let q = proj(g, slot::WQ, slot::BQ)?;
        let k = proj(g, slot::WK, slot::BK)?;
        let v = proj(g, slot::WV, slot::BV)?;
        let att = g.attention(q, k, v, shape)?;
        let (wo, bo) = (w(g, slot::WO), w(g, slot::BO));
        let att = g.matmul(att, wo)?;
        let att = g.add_bias(att, bo)?;
        h = g.add(h, att)?;

        let (g2, b2) = (w(g, slot::LN2_G), w(g, slot::LN2_B));
        let f = g.layer_norm(h, g2, b2, LAYER_NORM_EPS)?;
        let (w1, bias1) = (w(g, slot::W1), w(g, slot::B1));
        let f = g.matmul(f, w1)?;
        let f = g.add_bias(f, bias1)?;
        let f = g.gelu(f);
        let (w2, bias2) = (w(g, slot::W2), w(g, slot::B2));
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, bias2)?;
        h = g.add(h, f)?;
    }
    let last = 2 + cfg.layers * PER_LAYER;
    let (gf, bf) = (p(g, last), p(g, last + 1));
    let h = g.layer_norm(h, gf, bf, LAYER_NORM_EPS)?;
    g.matmul_bt(h, tok_table)
}

fn check_input(cfg: &ModelConfig, ids: &[u32], batch: usize, seq: usize) -> Result<()> {
    if ids.len() != batch * seq {
        return Err(Error::shape("forward", format!("{} ids for batch {batch} x seq {seq}", ids.len())));
    }
    if seq > cfg.max_seq {
        return Err(Error::Contract(format!(
            "sequence length {seq} exceeds the model maximum {}",
            cfg.max_seq
        )));
    }
    Ok(())
}

/// Tape-free twin of `transformer_logits`: borrows the weights and applies
/// the same kernels in the same order, so the logits agree bit for bit.
fn infer_logits<T: Scalar>(params: &ModelParams<T>, mode: AttentionMode, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
    let h = embed(params, ids, batch, seq)?;
    logits_from_block(params, mode, 0, h, batch, seq)
}

/// Token plus position embeddings, `[batch*seq × hidden]` row-major.
pub(crate) fn embed<T: Scalar>(params: &ModelParams<T>, ids: &[u32], batch: usize, seq: usize) -> Result<Vec<T>> {
    let cfg = &params.config;
    check_input(cfg, ids, batch, seq)?;
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { id: bad, size: cfg.vocab });
    }
    let d = cfg.hidden;
    let (tok, pos) = (params.tensors[TOK_EMB].data(), params.tensors[POS_EMB].data());
    let mut h = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        h.extend_from_slice(&tok[i as usize * d..(i as usize + 1) * d]);
    }
    for (r, chunk) in h.chunks_exact_mut(d).enumerate() {
        let p = r % seq.max(1);
        add_into(chunk, &pos[p * d..(p + 1) * d]);
    }
    Ok(h)
}

fn add_into<T: Scalar>(x: &mut [T], y: &[T]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a = *a + b);
}

/// Runs residual block `layer` in place on the stream `h`.
pub(crate) fn apply_block<T: Scalar>(params: &ModelParams<T>, mode: AttentionMode, layer: usize, h: &mut [T], batch: usize, seq: usize) {
    let cfg = &params.config;
    let (d, f, rows) = (cfg.hidden, cfg.ffn, batch * seq);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let w = |s: usize| params.tensors[2 + layer * PER_LAYER + s].data();
    let affine = |x: &[T], wt: &[T], b: &[T], k: usize, n: usize| {
        let mut y = vec![T::zero(); rows * n];
        ops::matmul_into(x, wt, &mut y, rows, k, n);
        y.chunks_exact_mut(n).for_each(|r| add_into(r, b));
        y
    };
    let shape = AttentionShape { batch, seq, heads: cfg.heads, causal: mode == AttentionMode::Causal };

    let (a, _, _) = ops::layer_norm_forward(h, w(slot::LN1_G), w(slot::LN1_B), eps);
    let q = affine(&a, w(slot::WQ), w(slot::BQ), d, d);
    let k = affine(&a, w(slot::WK), w(slot::BK), d, d);
    let v = affine(&a, w(slot::WV), w(slot::BV), d, d);
    let (att, _) = ops::attention_forward(&q, &k, &v, d, shape);
    let att = affine(&att, w(slot::WO), w(slot::BO), d, d);
    add_into(h, &att);

    let (x, _, _) = ops::layer_norm_forward(h, w(slot::LN2_G), w(slot::LN2_B), eps);
    let mut x = affine(&x, w(slot::W1), w(slot::B1), d, f);
    x.iter_mut().for_each(|v| *v = ops::gelu(*v));
    let x = affine(&x, w(slot::W2), w(slot::B2), f, d);
    add_into(h, &x);
}

/// Logits from the residual stream entering block `first`; `first ==
/// layers` applies only the final norm and the tied head.
pub(crate) fn logits_from_block<T: Scalar>(
    params: &ModelParams<T>,
    mode: AttentionMode,
    first: usize,
    h: Vec<T>,
    batch: usize,
    seq: usize,
) -> Result<Tensor<T>> {
    let h = final_hidden(params, mode, first, h, batch, seq)?;
    head_rows(params, &h, None)
}

/// Runs blocks `first..` and the final norm on the stream entering block `first`.
pub(crate) fn final_hidden<T: Scalar>(
    params: &ModelParams<T>,
    mode: AttentionMode,
    first: usize,
    mut h: Vec<T>,
    batch: usize,
    seq: usize,
) -> Result<Vec<T>> {
    let cfg = &params.config;
    if h.len() != batch * seq * cfg.hidden || first > cfg.layers {
        return Err(Error::shape("final_hidden", format!("stream of {} values at block {first}", h.len())));
    }
    for l in first..cfg.layers {
        apply_block(params, mode, l, &mut h, batch, seq);
    }
    let last = 2 + cfg.layers * PER_LAYER;
    let eps = T::from_f64(LAYER_NORM_EPS);
    Ok(ops::layer_norm_forward(&h, params.tensors[last].data(), params.tensors[last + 1].data(), eps).0)
}

/// Tied-head logits for the selected rows of a final hidden state, or all rows.
pub(crate) fn head_rows<T: Scalar>(params: &ModelParams<T>, h: &[T], rows: Option<&[usize]>) -> Result<Tensor<T>> {
    let (d, v) = (params.config.hidden, params.config.vocab);
    let picked: Vec<T>;
    let x = match rows {
        Some(rows) => {
            picked = rows.iter().flat_map(|&r| h[r * d..(r + 1) * d].iter().copied()).collect();
            &picked[..]
        }
        None => h,
    };
    let m = x.len() / d;
    let mut out = vec![T::zero(); m * v];
    ops::matmul_bt_into(x, params.tensors[TOK_EMB].data(), &mut out, m, d, v);
    Tensor::new([m, v], out)
}

/// Index of the block owning parameter tensor `t`: `None` for the
/// embeddings, `Some(layers)` for the final norm.
pub(crate) fn block_of(config: &ModelConfig, t: usize) -> Option<usize> {
    match t {
        TOK_EMB | POS_EMB => None,
        _ => Some(((t - 2) / PER_LAYER).min(config.layers)),
    }
}

/// Computes logits `[batch, seq, vocab]` without keeping the tape.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &SequenceBatch, mode: AttentionMode) -> Result<Tensor<T>> {
    if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= params.config.vocab) {
        return Err(Error::TokenOutOfRange { id: bad, size: params.config.vocab });
    }
    let mut g = Graph::new();
    let out = params.with_mode(mode).logits(&mut g, &batch.ids, batch.batch, batch.seq_len)?;
    if let Some(op) = g.non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    let vocab = params.config.vocab;
    g.value(out).clone().reshape([batch.batch, batch.seq_len, vocab])
}

/// One example: a prefix followed by a fixed-size target buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRow {
    pub prefix: Vec<u32>,
    /// Target buffer, PAD-filled to its full length.
    pub target: Vec<u32>,
    /// Loss weight per target slot (0 or 1).
    pub target_mask: Vec<u8>,
}

impl SequenceRow {
    /// Row whose loss covers every target slot, PAD included.
    pub fn new(prefix: Vec<u32>, target: Vec<u32>) -> Self {
        let target_mask = vec![1; target.len()];
        Self { prefix, target, target_mask }
    }

    /// Drops PAD slots from the loss.
    pub fn without_pad_loss(mut self) -> Self {
        for (m, &t) in self.target_mask.iter_mut().zip(&self.target) {
            if t == PAD {
                *m = 0;
            }
        }
        self
    }
}

/// Fixed-shape batch of `[prefix ‖ target buffer ‖ PAD tail]` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    /// Row-major `[batch × seq_len]`.
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub target_len: usize,
    pub prefix_len: Vec<usize>,
    /// Row-major `[batch × seq_len]`; nonzero only inside target buffers.
    pub loss_mask: Vec<u8>,
}

impl SequenceBatch {
    /// Packs rows sharing one target length. `seq_len` defaults to the longest row.
    pub fn from_rows(rows: &[SequenceRow], seq_len: Option<usize>) -> Result<Self> {
        let target_len = rows.first().map_or(0, |r| r.target.len());
        if rows.iter().any(|r| r.target.len() != target_len || r.target_mask.len() != target_len) {
            return Err(Error::Data("rows in a batch must share one target length".into()));
        }
        let longest = rows.iter().map(|r| r.prefix.len() + target_len).max().unwrap_or(0);
        let seq_len = seq_len.unwrap_or(longest);
        if seq_len < longest {
            return Err(Error::Data(format!("row of length {longest} exceeds batch length {seq_len}")));
        }
        let mut ids = vec![PAD; rows.len() * seq_len];
        let mut loss_mask = vec![0u8; rows.len() * seq_len];
        for (r, row) in rows.iter().enumerate() {
            let base = r * seq_len;
            let p = row.prefix.len();
            ids[base..base + p].copy_from_slice(&row.prefix);
            ids[base + p..base + p + target_len].copy_from_slice(&row.target);
            loss_mask[base + p..base + p + target_len].copy_from_slice(&row.target_mask);
        }
        Ok(Self {
            ids,
            batch: rows.len(),
            seq_len,
            target_len,
            prefix_len: rows.iter().map(|r| r.prefix.len()).collect(),
            loss_mask,
        })
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// Flat index range of row `r`'s target buffer.
    pub fn target_range(&self, r: usize) -> std::ops::Range<usize> {
        let start = r * self.seq_len + self.prefix_len[r];
        start..start + self.target_len
    }

    pub fn is_target_position(&self, flat: usize) -> bool {
        let r = flat / self.seq_len;
        self.target_range(r).contains(&flat)
    }

    /// Checks the structural invariants: prefix and tail carry no loss, the tail is PAD.
    pub fn validate(&self) -> Result<()> {
        let n = self.batch * self.seq_len;
        if self.ids.len() != n || self.loss_mask.len() != n || self.prefix_len.len() != self.batch {
            return Err(Error::Data("batch buffers disagree with batch x seq_len".into()));
        }
        for r in 0..self.batch {
            let end = self.prefix_len[r] + self.target_len;
            if end > self.seq_len {
                return Err(Error::Data(format!("row {r} overflows seq_len")));
            }
            let base = r * self.seq_len;
            let mask = &self.loss_mask[base..base + self.seq_len];
            if mask[..self.prefix_len[r]].iter().any(|&m| m != 0) {
                return Err(Error::Data(format!("row {r}: loss mask set on prefix")));
            }
            if mask[end..].iter().any(|&m| m != 0) || self.ids[base + end..base + self.seq_len].iter().any(|&t| t != PAD) {
                return Err(Error::Data(format!("row {r}: tail must be unmasked PAD")));
            }
        }
        Ok(())
    }
}
