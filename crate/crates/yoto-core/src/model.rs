//! Miniature transformer-style text encoder with a bank of classification
//! heads, exact forward pass, and hand-derived backward pass.
//!
//! Architecture: token embedding + learned positional embedding, then
//! `n_layers` blocks of (masked multi-head self-attention, residual, layer
//! norm, feed-forward with ReLU, residual, layer norm), then mean pooling
//! over non-pad positions, then one affine head per head id. Pad positions
//! are masked out of every attention row (their pre-softmax score is treated
//! as -inf, i.e. their softmax weight is exactly zero) and excluded from
//! pooling.
//!
//! Parameter names are dot-separated paths with prefix `encoder.` or
//! `head.<head_id>.`; shapes are fully determined by [`ModelConfig`] via
//! [`param_schema`]. Batch items are processed independently and in order,
//! so results are bit-deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, YotoError};
use crate::rng::SeededRng;
use crate::tensor::{self, matmul, rng_normal, transpose, Tensor};

/// Architecture hyperparameters. `vocab_size` is the embedding-table size
/// (an upper bound on token ids, not necessarily the number of tokens in
/// use).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale default used by the experiment protocols.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.vocab_size >= 1
            && self.d_model >= 1
            && self.n_heads >= 1
            && self.n_layers >= 1
            && self.d_ff >= 1
            && self.max_len >= 1;
        if !all_positive {
            return Err(YotoError::Config(format!(
                "all config fields must be >= 1: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(YotoError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Ordered name → tensor map holding encoder parameters and the head bank.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedParams {
    entries: BTreeMap<String, Tensor>,
}

fn validate_param_name(name: &str) -> Result<()> {
    if let Some(rest) = name.strip_prefix("encoder.") {
        if rest.is_empty() {
            return Err(YotoError::InvalidArgument(format!(
                "parameter name '{name}' has an empty path"
            )));
        }
        return Ok(());
    }
    if let Some(rest) = name.strip_prefix("head.") {
        if let Some((id, tail)) = rest.split_once('.') {
            validate_head_id(id)?;
            if !tail.is_empty() {
                return Ok(());
            }
        }
        return Err(YotoError::InvalidArgument(format!(
            "head parameter name '{name}' must look like head.<id>.<field>"
        )));
    }
    Err(YotoError::InvalidArgument(format!(
        "parameter name '{name}' must start with 'encoder.' or 'head.<id>.'"
    )))
}

pub fn validate_head_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(YotoError::InvalidArgument(format!(
            "head id '{id}' must be nonempty and use only [A-Za-z0-9_-]"
        )))
    }
}

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        validate_param_name(name)?;
        if self.entries.contains_key(name) {
            return Err(YotoError::InvalidArgument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| YotoError::InvalidArgument(format!("missing parameter '{name}'")))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        validate_param_name(name)?;
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    /// Lexicographic iteration (the canonical order for fingerprints and
    /// serialization).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoder_iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.iter().filter(|(n, _)| n.starts_with("encoder."))
    }

    pub fn head_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .keys()
            .filter_map(|n| n.strip_prefix("head."))
            .filter_map(|rest| rest.split_once('.').map(|(id, _)| id.to_string()))
            .collect();
        ids.dedup();
        ids
    }

    pub fn has_head(&self, head_id: &str) -> bool {
        self.entries.contains_key(&format!("head.{head_id}.w"))
    }

    /// Number of classes of a head (columns of its weight matrix).
    pub fn head_classes(&self, head_id: &str) -> Result<usize> {
        let w = self
            .get(&format!("head.{head_id}.w"))
            .ok_or_else(|| YotoError::MissingHead(head_id.to_string()))?;
        Ok(w.cols())
    }

    /// Same names and shapes, all-zero values.
    pub fn zeros_like(&self) -> NamedParams {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        NamedParams { entries }
    }

    /// Copy with only the `encoder.*` entries.
    pub fn encoder_only(&self) -> NamedParams {
        let entries = self
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        NamedParams { entries }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}

/// Shape schema for every parameter of a model with the given heads
/// (`head id → number of classes`).
pub fn param_schema(
    config: &ModelConfig,
    heads: &BTreeMap<String, usize>,
) -> BTreeMap<String, Vec<usize>> {
    let d = config.d_model;
    let mut schema = BTreeMap::new();
    schema.insert("encoder.embed.tok".into(), vec![config.vocab_size, d]);
    schema.insert("encoder.embed.pos".into(), vec![config.max_len, d]);
    for l in 0..config.n_layers {
        let p = format!("encoder.block{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            schema.insert(format!("{p}.attn.{w}"), vec![d, d]);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            schema.insert(format!("{p}.attn.{b}"), vec![d]);
        }
        for norm in ["norm1", "norm2"] {
            schema.insert(format!("{p}.{norm}.gain"), vec![d]);
            schema.insert(format!("{p}.{norm}.bias"), vec![d]);
        }
        schema.insert(format!("{p}.ff.w1"), vec![d, config.d_ff]);
        schema.insert(format!("{p}.ff.b1"), vec![config.d_ff]);
        schema.insert(format!("{p}.ff.w2"), vec![config.d_ff, d]);
        schema.insert(format!("{p}.ff.b2"), vec![d]);
    }
    for (id, classes) in heads {
        schema.insert(format!("head.{id}.w"), vec![d, *classes]);
        schema.insert(format!("head.{id}.b"), vec![*classes]);
    }
    schema
}

/// Checks that `params` matches the schema implied by `config`: encoder
/// entries exactly, plus a consistent (w, b) pair per head.
pub fn validate_schema(params: &NamedParams, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    let encoder_schema = param_schema(config, &BTreeMap::new());
    let mut seen = 0usize;
    for (name, tensor) in params.iter() {
        if let Some(shape) = encoder_schema.get(name) {
            if tensor.shape() != shape.as_slice() {
                return Err(YotoError::Invariant(format!(
                    "parameter '{name}' has shape {:?}, schema expects {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            seen += 1;
        } else if name.starts_with("encoder.") {
            return Err(YotoError::Invariant(format!(
                "unexpected encoder parameter '{name}'"
            )));
        }
    }
    if seen != encoder_schema.len() {
        return Err(YotoError::Invariant(format!(
            "encoder has {seen} of {} schema parameters",
            encoder_schema.len()
        )));
    }
    for id in params.head_ids() {
        let w = params
            .get(&format!("head.{id}.w"))
            .ok_or_else(|| YotoError::Invariant(format!("head '{id}' missing weight")))?;
        let b = params
            .get(&format!("head.{id}.b"))
            .ok_or_else(|| YotoError::Invariant(format!("head '{id}' missing bias")))?;
        if w.rank() != 2 || w.shape()[0] != config.d_model || b.rank() != 1 || b.len() != w.cols() {
            return Err(YotoError::Invariant(format!(
                "head '{id}' has inconsistent shapes w {:?} / b {:?}",
                w.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Fresh parameters: weights ~ N(0, 0.02²), biases zero, norm gains one.
///
/// Tensors are sampled in lexicographic schema order, so the result is a
/// pure function of (config, heads, seed). The rule is by the final path
/// segment: `gain` → ones, a segment starting with `b` → zeros, anything
/// else → sampled.
pub fn init_params(
    config: &ModelConfig,
    heads: &BTreeMap<String, usize>,
    rng: &mut SeededRng,
) -> Result<NamedParams> {
    config.validate()?;
    for (id, classes) in heads {
        validate_head_id(id)?;
        if *classes == 0 {
            return Err(YotoError::Config(format!("head '{id}' needs >= 1 class")));
        }
    }
    let schema = param_schema(config, heads);
    let mut params = NamedParams::new();
    for (name, shape) in &schema {
        let last = name.rsplit('.').next().unwrap();
        let tensor = if last == "gain" {
            Tensor::filled(shape, 1.0)
        } else if last.starts_with('b') {
            Tensor::zeros(shape)
        } else {
            rng_normal(rng, shape, 0.02)?
        };
        params.insert(name, tensor)?;
    }
    Ok(params)
}

// ───────────────────────── batches ─────────────────────────

/// Padded token-id matrix plus pad mask. Rows are rectangular; pad slots
/// hold id 0 and mask false. Every row must keep at least one real token.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(ids: Vec<Vec<u32>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        if ids.is_empty() {
            return Err(YotoError::InvalidArgument("empty batch".into()));
        }
        if ids.len() != mask.len() {
            return Err(YotoError::InvalidArgument(
                "ids and mask row counts differ".into(),
            ));
        }
        let t = ids[0].len();
        for (row, mrow) in ids.iter().zip(&mask) {
            if row.len() != t || mrow.len() != t {
                return Err(YotoError::InvalidArgument(
                    "batch rows must be rectangular".into(),
                ));
            }
            if !mrow.iter().any(|&m| m) {
                return Err(YotoError::InvalidArgument(
                    "batch row with no non-pad token".into(),
                ));
            }
        }
        Ok(Batch { ids, mask })
    }

    /// Pads variable-length sequences with id 0 / mask false.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(YotoError::InvalidArgument("empty batch".into()));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap();
        if t == 0 {
            return Err(YotoError::InvalidArgument(
                "batch row with no non-pad token".into(),
            ));
        }
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(YotoError::InvalidArgument(
                    "batch row with no non-pad token".into(),
                ));
            }
            let mut row = s.clone();
            let mut mrow = vec![true; s.len()];
            row.resize(t, 0);
            mrow.resize(t, false);
            ids.push(row);
            mask.push(mrow);
        }
        Ok(Batch { ids, mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids[0].len()
    }
}

// ───────────────────────── caches ─────────────────────────

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<Tensor>,
    ctx: Tensor,
    norm1: NormCache,
    y1: Tensor,
    h1: Tensor,
    a1: Tensor,
    norm2: NormCache,
    y2: Tensor,
}

#[derive(Debug, Clone)]
struct ItemCache {
    ids: Vec<u32>,
    mask: Vec<bool>,
    layers: Vec<LayerCache>,
}

impl ItemCache {
    fn hidden(&self) -> &Tensor {
        &self.layers.last().unwrap().y2
    }
}

/// Everything [`encode`] computed, per batch item: all intermediate
/// activations the backward pass needs.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    config: ModelConfig,
    items: Vec<ItemCache>,
}

impl EncodeCache {
    pub fn batch_len(&self) -> usize {
        self.items.len()
    }

    /// Final hidden states of one batch item (seq_len × d_model).
    pub fn hidden(&self, item: usize) -> &Tensor {
        self.items[item].hidden()
    }

    pub fn mask(&self, item: usize) -> &[bool] {
        &self.items[item].mask
    }

    /// Attention weights of one (item, layer, head); rows over non-pad
    /// columns sum to 1.
    pub fn attention(&self, item: usize, layer: usize, head: usize) -> &Tensor {
        &self.items[item].layers[layer].attn[head]
    }
}

/// [`EncodeCache`] plus the pooled features and head logits of a
/// classification forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    enc: EncodeCache,
    head_id: String,
    pooled: Tensor,
    logits: Tensor,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }

    pub fn head_id(&self) -> &str {
        &self.head_id
    }

    pub fn encode_cache(&self) -> &EncodeCache {
        &self.enc
    }
}

// ───────────────────────── forward ─────────────────────────

fn add_row_broadcast(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let cols = m.cols();
    if v.rank() != 1 || v.len() != cols {
        return Err(YotoError::ShapeMismatch {
            op: "add_row_broadcast",
            lhs: m.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (x, b) in row.iter_mut().zip(v.data()) {
            *x += b;
        }
    }
    Ok(out)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_row_broadcast(&matmul(x, w)?, b)
}

fn col_slice(t: &Tensor, from: usize, width: usize) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = vec![0.0f32; rows * width];
    for r in 0..rows {
        out[r * width..(r + 1) * width]
            .copy_from_slice(&t.data()[r * cols + from..r * cols + from + width]);
    }
    Tensor::matrix(rows, width, out).unwrap()
}

fn col_write(dst: &mut Tensor, from: usize, src: &Tensor) {
    let (rows, cols, width) = (dst.rows(), dst.cols(), src.cols());
    for r in 0..rows {
        let base = r * cols + from;
        dst.data_mut()[base..base + width].copy_from_slice(src.row(r));
    }
}

/// Row softmax where disallowed columns act as -inf scores: their weight is
/// exactly zero and the max subtraction only sees allowed columns.
fn masked_softmax_rows(scores: &Tensor, allowed: &[bool]) -> Tensor {
    let cols = scores.cols();
    let mut out = scores.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let mut max = f32::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if allowed[j] && s > max {
                max = s;
            }
        }
        let mut sum = 0.0f32;
        for (j, s) in row.iter_mut().enumerate() {
            if allowed[j] {
                *s = (*s - max).exp();
                sum += *s;
            } else {
                *s = 0.0;
            }
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    out
}

fn layer_norm_cached(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, NormCache) {
    const EPS: f32 = 1e-5;
    let n = x.cols();
    let rows = x.rows();
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let mut y = vec![0.0f32; x.len()];
    for (r, row) in x.data().chunks(n).enumerate() {
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + EPS).sqrt();
        inv_std.push(inv);
        for j in 0..n {
            let h = (row[j] - mean) * inv;
            xhat[r * n + j] = h;
            y[r * n + j] = gain.at(j) * h + bias.at(j);
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), y).unwrap(),
        NormCache {
            xhat: Tensor::new(shape, xhat).unwrap(),
            inv_std,
        },
    )
}

fn encode_item(
    params: &NamedParams,
    config: &ModelConfig,
    ids: &[u32],
    mask: &[bool],
) -> Result<ItemCache> {
    let d = config.d_model;
    let t_len = ids.len();
    let tok = params.expect("encoder.embed.tok")?;
    let pos = params.expect("encoder.embed.pos")?;

    let mut x = vec![0.0f32; t_len * d];
    for (t, &id) in ids.iter().enumerate() {
        let trow = tok.row(id as usize);
        let prow = pos.row(t);
        for j in 0..d {
            x[t * d + j] = trow[j] + prow[j];
        }
    }
    let mut x = Tensor::matrix(t_len, d, x)?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("encoder.block{l}");
        let q = linear(&x, params.expect(&format!("{p}.attn.wq"))?, params.expect(&format!("{p}.attn.bq"))?)?;
        let k = linear(&x, params.expect(&format!("{p}.attn.wk"))?, params.expect(&format!("{p}.attn.bk"))?)?;
        let v = linear(&x, params.expect(&format!("{p}.attn.wv"))?, params.expect(&format!("{p}.attn.bv"))?)?;

        let mut attn = Vec::with_capacity(config.n_heads);
        let mut ctx = Tensor::zeros(&[t_len, d]);
        for h in 0..config.n_heads {
            let qh = col_slice(&q, h * dh, dh);
            let kh = col_slice(&k, h * dh, dh);
            let vh = col_slice(&v, h * dh, dh);
            let scores = tensor::scale(scale, &matmul(&qh, &transpose(&kh))?);
            let a = masked_softmax_rows(&scores, mask);
            let ch = matmul(&a, &vh)?;
            col_write(&mut ctx, h * dh, &ch);
            attn.push(a);
        }

        let attn_out = linear(&ctx, params.expect(&format!("{p}.attn.wo"))?, params.expect(&format!("{p}.attn.bo"))?)?;
        let r1 = tensor::add(&x, &attn_out)?;
        let (y1, norm1) = layer_norm_cached(
            &r1,
            params.expect(&format!("{p}.norm1.gain"))?,
            params.expect(&format!("{p}.norm1.bias"))?,
        );

        let h1 = linear(&y1, params.expect(&format!("{p}.ff.w1"))?, params.expect(&format!("{p}.ff.b1"))?)?;
        let a1 = tensor::relu(&h1);
        let ff = linear(&a1, params.expect(&format!("{p}.ff.w2"))?, params.expect(&format!("{p}.ff.b2"))?)?;
        let r2 = tensor::add(&y1, &ff)?;
        let (y2, norm2) = layer_norm_cached(
            &r2,
            params.expect(&format!("{p}.norm2.gain"))?,
            params.expect(&format!("{p}.norm2.bias"))?,
        );

        layers.push(LayerCache {
            x_in: x,
            q,
            k,
            v,
            attn,
            ctx,
            norm1,
            y1,
            h1,
            a1,
            norm2,
            y2: y2.clone(),
        });
        x = y2;
    }

    Ok(ItemCache {
        ids: ids.to_vec(),
        mask: mask.to_vec(),
        layers,
    })
}

fn check_batch(config: &ModelConfig, batch: &Batch) -> Result<()> {
    if batch.seq_len() > config.max_len {
        return Err(YotoError::SequenceTooLong {
            len: batch.seq_len(),
            max: config.max_len,
        });
    }
    for row in &batch.ids {
        for &id in row {
            if id as usize >= config.vocab_size {
                return Err(YotoError::Index(format!(
                    "token id {id} out of vocabulary range {}",
                    config.vocab_size
                )));
            }
        }
    }
    Ok(())
}

/// Runs the encoder stack over a batch, returning the full activation cache.
pub fn encode(params: &NamedParams, config: &ModelConfig, batch: &Batch) -> Result<EncodeCache> {
    config.validate()?;
    check_batch(config, batch)?;
    let mut items = Vec::with_capacity(batch.len());
    for (ids, mask) in batch.ids.iter().zip(&batch.mask) {
        items.push(encode_item(params, config, ids, mask)?);
    }
    Ok(EncodeCache {
        config: config.clone(),
        items,
    })
}

fn pool_items(enc: &EncodeCache) -> Tensor {
    let d = enc.config.d_model;
    let mut pooled = vec![0.0f32; enc.items.len() * d];
    for (i, item) in enc.items.iter().enumerate() {
        let hidden = item.hidden();
        let n = item.mask.iter().filter(|&&m| m).count() as f32;
        let prow = &mut pooled[i * d..(i + 1) * d];
        for (t, &m) in item.mask.iter().enumerate() {
            if m {
                for (p, h) in prow.iter_mut().zip(hidden.row(t)) {
                    *p += h;
                }
            }
        }
        for p in prow.iter_mut() {
            *p /= n;
        }
    }
    Tensor::matrix(enc.items.len(), d, pooled).unwrap()
}

/// Full classification forward: encode, mean-pool non-pad positions, apply
/// the named head. Returns (logits, cache).
pub fn forward(
    params: &NamedParams,
    config: &ModelConfig,
    batch: &Batch,
    head_id: &str,
) -> Result<(Tensor, ForwardCache)> {
    if !params.has_head(head_id) {
        return Err(YotoError::MissingHead(head_id.to_string()));
    }
    let enc = encode(params, config, batch)?;
    let pooled = pool_items(&enc);
    let logits = linear(
        &pooled,
        params.expect(&format!("head.{head_id}.w"))?,
        params.expect(&format!("head.{head_id}.b"))?,
    )?;
    Ok((
        logits.clone(),
        ForwardCache {
            enc,
            head_id: head_id.to_string(),
            pooled,
            logits,
        },
    ))
}

/// Row-wise argmax over head logits; ties break toward the lower class id.
pub fn predict(
    params: &NamedParams,
    config: &ModelConfig,
    batch: &Batch,
    head_id: &str,
) -> Result<Vec<usize>> {
    let (logits, _) = forward(params, config, batch, head_id)?;
    Ok(argmax_rows(&logits))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.cols();
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ───────────────────────── backward ─────────────────────────

fn colsum(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0f32; cols];
    for row in t.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn acc_into(grads: &mut NamedParams, name: &str, delta: &Tensor) {
    let slot = grads
        .get_mut(name)
        .unwrap_or_else(|| panic!("gradient slot '{name}' missing"));
    debug_assert_eq!(slot.shape(), delta.shape());
    for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
        *g += d;
    }
}

/// Backward through `y = gain ⊙ x̂ + bias`; returns (dx, dgain, dbias).
fn layer_norm_backward(dy: &Tensor, cache: &NormCache, gain: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = dy.cols();
    let rows = dy.rows();
    let mut dgain = vec![0.0f32; n];
    let mut dbias = vec![0.0f32; n];
    let mut dx = vec![0.0f32; dy.len()];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let inv = cache.inv_std[r];
        let mut mean_dxhat = 0.0f32;
        let mut mean_dxhat_xhat = 0.0f32;
        for j in 0..n {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let dxh = dyr[j] * gain.at(j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= n as f32;
        mean_dxhat_xhat /= n as f32;
        for j in 0..n {
            let dxh = dyr[j] * gain.at(j);
            dx[r * n + j] = inv * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).unwrap(),
        Tensor::vector(dgain),
        Tensor::vector(dbias),
    )
}

/// Backward through one softmax row set: `ds = a ⊙ (da - <da, a>)` per row.
/// Masked columns carry zero attention weight, so their score grad is zero.
fn softmax_backward(a: &Tensor, da: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = vec![0.0f32; a.len()];
    for (r, (arow, darow)) in a.data().chunks(cols).zip(da.data().chunks(cols)).enumerate() {
        let dot: f32 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
        for j in 0..cols {
            out[r * cols + j] = arow[j] * (darow[j] - dot);
        }
    }
    Tensor::new(a.shape().to_vec(), out).unwrap()
}

fn backward_item(
    params: &NamedParams,
    config: &ModelConfig,
    item: &ItemCache,
    dhidden: &Tensor,
    grads: &mut NamedParams,
) -> Result<()> {
    let d = config.d_model;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    let mut dy2 = dhidden.clone();
    for (l, layer) in item.layers.iter().enumerate().rev() {
        let p = format!("encoder.block{l}");

        // norm2
        let g2 = params.expect(&format!("{p}.norm2.gain"))?;
        let (dr2, dgain2, dbias2) = layer_norm_backward(&dy2, &layer.norm2, g2);
        acc_into(grads, &format!("{p}.norm2.gain"), &dgain2);
        acc_into(grads, &format!("{p}.norm2.bias"), &dbias2);

        // r2 = y1 + ff
        let mut dy1 = dr2.clone();
        let dff = dr2;

        // ff = relu(y1·w1 + b1)·w2 + b2
        let w2 = params.expect(&format!("{p}.ff.w2"))?;
        acc_into(grads, &format!("{p}.ff.w2"), &matmul(&transpose(&layer.a1), &dff)?);
        acc_into(grads, &format!("{p}.ff.b2"), &colsum(&dff));
        let da1 = matmul(&dff, &transpose(w2))?;
        let mut dh1 = da1;
        for (g, h) in dh1.data_mut().iter_mut().zip(layer.h1.data()) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let w1 = params.expect(&format!("{p}.ff.w1"))?;
        acc_into(grads, &format!("{p}.ff.w1"), &matmul(&transpose(&layer.y1), &dh1)?);
        acc_into(grads, &format!("{p}.ff.b1"), &colsum(&dh1));
        dy1 = tensor::add(&dy1, &matmul(&dh1, &transpose(w1))?)?;

        // norm1
        let g1 = params.expect(&format!("{p}.norm1.gain"))?;
        let (dr1, dgain1, dbias1) = layer_norm_backward(&dy1, &layer.norm1, g1);
        acc_into(grads, &format!("{p}.norm1.gain"), &dgain1);
        acc_into(grads, &format!("{p}.norm1.bias"), &dbias1);

        // r1 = x_in + attn_out
        let mut dx = dr1.clone();
        let dattn = dr1;

        // attn_out = ctx·wo + bo
        let wo = params.expect(&format!("{p}.attn.wo"))?;
        acc_into(grads, &format!("{p}.attn.wo"), &matmul(&transpose(&layer.ctx), &dattn)?);
        acc_into(grads, &format!("{p}.attn.bo"), &colsum(&dattn));
        let dctx = matmul(&dattn, &transpose(wo))?;

        let t_len = layer.x_in.rows();
        let mut dq = Tensor::zeros(&[t_len, d]);
        let mut dk = Tensor::zeros(&[t_len, d]);
        let mut dv = Tensor::zeros(&[t_len, d]);
        for h in 0..config.n_heads {
            let dch = col_slice(&dctx, h * dh, dh);
            let a = &layer.attn[h];
            let kh = col_slice(&layer.k, h * dh, dh);
            let vh = col_slice(&layer.v, h * dh, dh);
            let qh = col_slice(&layer.q, h * dh, dh);

            let da = matmul(&dch, &transpose(&vh))?;
            let dvh = matmul(&transpose(a), &dch)?;
            let ds = tensor::scale(scale, &softmax_backward(a, &da));
            let dqh = matmul(&ds, &kh)?;
            let dkh = matmul(&transpose(&ds), &qh)?;

            col_write(&mut dq, h * dh, &dqh);
            col_write(&mut dk, h * dh, &dkh);
            col_write(&mut dv, h * dh, &dvh);
        }

        // q/k/v = x_in·w + b
        for (proj, dproj) in [("q", &dq), ("k", &dk), ("v", &dv)] {
            let wname = format!("{p}.attn.w{proj}");
            let bname = format!("{p}.attn.b{proj}");
            acc_into(grads, &wname, &matmul(&transpose(&layer.x_in), dproj)?);
            acc_into(grads, &bname, &colsum(dproj));
            dx = tensor::add(&dx, &matmul(dproj, &transpose(params.expect(&wname)?))?)?;
        }

        dy2 = dx;
    }

    // embeddings
    let dx0 = dy2;
    let dtok = grads.get_mut("encoder.embed.tok").unwrap();
    for (t, &id) in item.ids.iter().enumerate() {
        let base = id as usize * d;
        for j in 0..d {
            dtok.data_mut()[base + j] += dx0.get(t, j);
        }
    }
    let dpos = grads.get_mut("encoder.embed.pos").unwrap();
    for t in 0..item.ids.len() {
        let base = t * d;
        for j in 0..d {
            dpos.data_mut()[base + j] += dx0.get(t, j);
        }
    }
    Ok(())
}

/// Exact gradients of a scalar objective w.r.t. every parameter, given the
/// objective's gradient at the head logits. Parameters the pass never
/// touches (other heads) get zero gradients.
pub fn backward(
    params: &NamedParams,
    config: &ModelConfig,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<NamedParams> {
    if &cache.enc.config != config {
        return Err(YotoError::CacheMismatch(
            "cache was built under a different config".into(),
        ));
    }
    if !params.has_head(&cache.head_id) {
        return Err(YotoError::CacheMismatch(format!(
            "cache head '{}' not present in params",
            cache.head_id
        )));
    }
    if grad_logits.shape() != cache.logits.shape() {
        return Err(YotoError::ShapeMismatch {
            op: "backward/grad_logits",
            lhs: grad_logits.shape().to_vec(),
            rhs: cache.logits.shape().to_vec(),
        });
    }

    let mut grads = params.zeros_like();
    let wname = format!("head.{}.w", cache.head_id);
    let bname = format!("head.{}.b", cache.head_id);

    acc_into(&mut grads, &wname, &matmul(&transpose(&cache.pooled), grad_logits)?);
    acc_into(&mut grads, &bname, &colsum(grad_logits));
    let dpooled = matmul(grad_logits, &transpose(params.expect(&wname)?))?;

    let d = config.d_model;
    for (i, item) in cache.enc.items.iter().enumerate() {
        let n = item.mask.iter().filter(|&&m| m).count() as f32;
        let t_len = item.ids.len();
        let mut dhidden = vec![0.0f32; t_len * d];
        for (t, &m) in item.mask.iter().enumerate() {
            if m {
                for j in 0..d {
                    dhidden[t * d + j] = dpooled.get(i, j) / n;
                }
            }
        }
        let dhidden = Tensor::matrix(t_len, d, dhidden)?;
        backward_item(params, config, item, &dhidden, &mut grads)?;
    }
    Ok(grads)
}

/// Backward from per-position hidden-state gradients (one seq_len × d_model
/// tensor per batch item); used by the masked-token pretraining objective.
pub fn backward_from_hidden(
    params: &NamedParams,
    config: &ModelConfig,
    enc: &EncodeCache,
    grad_hidden: &[Tensor],
) -> Result<NamedParams> {
    if &enc.config != config {
        return Err(YotoError::CacheMismatch(
            "cache was built under a different config".into(),
        ));
    }
    if grad_hidden.len() != enc.items.len() {
        return Err(YotoError::CacheMismatch(format!(
            "{} hidden grads for {} cached items",
            grad_hidden.len(),
            enc.items.len()
        )));
    }
    let mut grads = params.zeros_like();
    for (item, dh) in enc.items.iter().zip(grad_hidden) {
        if dh.shape() != item.hidden().shape() {
            return Err(YotoError::ShapeMismatch {
                op: "backward_from_hidden",
                lhs: dh.shape().to_vec(),
                rhs: item.hidden().shape().to_vec(),
            });
        }
        backward_item(params, config, item, dh, &mut grads)?;
    }
    Ok(grads)
}
