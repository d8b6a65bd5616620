//! Loss, optimizer, and the three training procedures: masked-token
//! pretraining of the shared base, independent per-vulnerability
//! fine-tuning, and joint training on concatenated datasets (the
//! upper-bound comparator).
//!
//! Every run is a pure function of (inputs, hyper): batch order is shuffled
//! with a per-epoch seed derived as `derive_seed(hyper.seed, STREAM + epoch)`
//! and all parameter updates happen in lexicographic name order, so two runs
//! with the same inputs produce bit-identical checkpoints.

use std::collections::BTreeMap;

use crate::corpus::{build_vocab, concat_datasets, Dataset, Vocab, MASK_ID};
use crate::error::{Result, YotoError};
use crate::model::{
    self, argmax_rows, init_params, Batch, ModelConfig, NamedParams,
};
use crate::rng::{derive_seed, SeededRng};
use crate::store::{fingerprint, Checkpoint, CheckpointMeta, Role};
use crate::tensor::{matmul, rng_normal, softmax_rows, transpose, Tensor};

// rng stream tags (see module docs)
const STREAM_INIT: u64 = 0x01;
const STREAM_HEAD: u64 = 0x02;
const STREAM_PRETRAIN_EPOCH: u64 = 0x1000;
const STREAM_FINETUNE_EPOCH: u64 = 0x2000;

/// Training hyperparameters. Desk-scale defaults; the reference recipe
/// (128 epochs, encoder lr 1e-5) targets a ~10³× larger encoder and stays
/// reachable through these fields.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f32,
    pub lr_head: f32,
    pub vul_class_weight: f32,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 30,
            batch_size: 16,
            lr_encoder: 1e-4,
            lr_head: 1e-2,
            vul_class_weight: 5.0,
            seed: 42,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr_encoder > 0.0
            && self.lr_head > 0.0
            && self.vul_class_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(YotoError::Config(format!(
                "hyperparameters must be positive: {self:?}"
            )))
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

/// Adam moments and step counter; moment shapes mirror the parameter map.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: NamedParams,
    v: NamedParams,
    step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(params: &NamedParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Weighted cross-entropy over a batch of logits.
///
/// `loss = (1/Σ wᵢ) Σ wᵢ · (−log softmax(logits)ᵢ,targetᵢ)` where
/// `wᵢ = class_weights[targetᵢ]`; the returned gradient is exact:
/// `∂loss/∂logitsᵢ = (wᵢ/Σw) · (softmaxᵢ − onehot(targetᵢ))`.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    class_weights: &[f32],
) -> Result<(f32, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    if targets.len() != b {
        return Err(YotoError::InvalidArgument(format!(
            "{} targets for {b} logit rows",
            targets.len()
        )));
    }
    if class_weights.len() != c {
        return Err(YotoError::InvalidArgument(format!(
            "{} class weights for {c} classes",
            class_weights.len()
        )));
    }
    if class_weights.iter().any(|&w| w <= 0.0) {
        return Err(YotoError::InvalidArgument(
            "class weights must be positive".into(),
        ));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(YotoError::Index(format!(
                "target {t} out of range for {c} classes (row {i})"
            )));
        }
    }

    let probs = softmax_rows(logits);
    let total_w: f32 = targets.iter().map(|&t| class_weights[t]).sum();
    let mut loss = 0.0f32;
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        let w = class_weights[t];
        // clamp away exact zeros so a confidently wrong row stays finite
        let p = probs.get(i, t).max(f32::MIN_POSITIVE);
        loss += w * -p.ln();
        let row_scale = w / total_w;
        let grow = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, g) in grow.iter_mut().enumerate() {
            let onehot = if j == t { 1.0 } else { 0.0 };
            *g = row_scale * (*g - onehot);
        }
    }
    Ok((loss / total_w, grad))
}

/// One Adam step with bias correction. Parameters resolve their learning
/// rate through the longest matching name prefix in `lr_map`; a parameter
/// no prefix covers is a configuration error.
pub fn adam_step(
    state: &mut AdamState,
    params: &NamedParams,
    grads: &NamedParams,
    lr_map: &BTreeMap<String, f32>,
) -> Result<NamedParams> {
    if grads.len() != params.len() {
        return Err(YotoError::CacheMismatch(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t as i32);

    let mut out = NamedParams::new();
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| {
            YotoError::CacheMismatch(format!("no gradient for parameter '{name}'"))
        })?;
        if g.shape() != p.shape() {
            return Err(YotoError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let lr = lr_map
            .iter()
            .filter(|(prefix, _)| name.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map(|(_, &lr)| lr)
            .ok_or_else(|| {
                YotoError::Config(format!("no learning rate covers parameter '{name}'"))
            })?;

        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let mut updated = p.clone();
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = (mi as f64 / bc1) as f32;
            let vhat = (vi as f64 / bc2) as f32;
            updated.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        out.set(name, updated)?;
    }
    Ok(out)
}

/// Encoder/head dual-rate map per the training recipe.
pub fn dual_lr_map(hyper: &TrainHyper) -> BTreeMap<String, f32> {
    BTreeMap::from([
        ("encoder.".to_string(), hyper.lr_encoder),
        ("head.".to_string(), hyper.lr_head),
    ])
}

/// Per-epoch training statistics; serializes to the `epoch,loss,train_acc`
/// CSV emitted beside every training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochStat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f32,
    pub train_acc: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", r.epoch, r.loss, r.train_acc));
        }
        out
    }

    /// Mean loss of the first and last epoch, for the loss-decreases check.
    pub fn first_last_loss(&self) -> Option<(f32, f32)> {
        Some((self.rows.first()?.loss, self.rows.last()?.loss))
    }
}

fn batched_indices(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ───────────────────────── pretraining ─────────────────────────

const MLM_HEAD: &str = "mlm";
const MASK_FRACTION: f64 = 0.15;

/// Result of [`pretrain`]: the checkpoint (auxiliary vocabulary-projection
/// head already discarded) plus the training log and a probe that can still
/// score masked-token accuracy on held-out snippets.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    mlm_w: Tensor,
    mlm_b: Tensor,
}

fn mask_tokens(
    seq: &[u32],
    rng: &mut SeededRng,
) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut masked = seq.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in seq.iter().enumerate() {
        if rng.next_f64() < MASK_FRACTION {
            masked[pos] = MASK_ID;
            targets.push((pos, id));
        }
    }
    if targets.is_empty() {
        let pos = rng.next_below(seq.len());
        targets.push((pos, seq[pos]));
        masked[pos] = MASK_ID;
    }
    (masked, targets)
}

/// One masked-token step over a token batch: returns (loss, #correct,
/// #masked) and accumulates gradients + the optimizer step.
#[allow(clippy::too_many_arguments)]
fn mlm_step(
    params: &mut NamedParams,
    config: &ModelConfig,
    adam: &mut AdamState,
    lr_map: &BTreeMap<String, f32>,
    seqs: &[Vec<u32>],
    rng: &mut SeededRng,
    train: bool,
) -> Result<(f32, usize, usize)> {
    let mut masked_seqs = Vec::with_capacity(seqs.len());
    let mut wants: Vec<Vec<(usize, u32)>> = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let (m, t) = mask_tokens(seq, rng);
        masked_seqs.push(m);
        wants.push(t);
    }
    let batch = Batch::from_sequences(&masked_seqs)?;
    let enc = model::encode(params, config, &batch)?;

    let d = config.d_model;
    let total_masked: usize = wants.iter().map(Vec::len).sum();
    let mut gathered = vec![0.0f32; total_masked * d];
    let mut targets = Vec::with_capacity(total_masked);
    let mut slots = Vec::with_capacity(total_masked);
    let mut row = 0usize;
    for (item, want) in wants.iter().enumerate() {
        let hidden = enc.hidden(item);
        for &(pos, orig) in want {
            gathered[row * d..(row + 1) * d].copy_from_slice(hidden.row(pos));
            targets.push(orig as usize);
            slots.push((item, pos));
            row += 1;
        }
    }
    let gathered = Tensor::matrix(total_masked, d, gathered)?;

    let w_name = format!("head.{MLM_HEAD}.w");
    let b_name = format!("head.{MLM_HEAD}.b");
    let logits = matmul(&gathered, params.expect(&w_name)?)?;
    let logits = {
        let b = params.expect(&b_name)?;
        let mut l = logits;
        for r in l.data_mut().chunks_mut(config.vocab_size) {
            for (x, bv) in r.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        l
    };

    let uniform = vec![1.0f32; config.vocab_size];
    let (loss, grad_logits) = weighted_cross_entropy(&logits, &targets, &uniform)?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(&targets)
        .filter(|(p, t)| *p == *t)
        .count();

    if train {
        let mut grads = model::backward_from_hidden(params, config, &enc, &{
            let mut dhidden: Vec<Tensor> = (0..seqs.len())
                .map(|i| Tensor::zeros(enc.hidden(i).shape()))
                .collect();
            let dgathered = matmul(&grad_logits, &transpose(params.expect(&w_name)?))?;
            for (r, &(item, pos)) in slots.iter().enumerate() {
                let dst = &mut dhidden[item];
                let base = pos * d;
                for j in 0..d {
                    dst.data_mut()[base + j] += dgathered.get(r, j);
                }
            }
            dhidden
        })?;
        let dw = matmul(&transpose(&gathered), &grad_logits)?;
        let gw = grads.get_mut(&w_name).unwrap();
        for (g, x) in gw.data_mut().iter_mut().zip(dw.data()) {
            *g += x;
        }
        let gb = grads.get_mut(&b_name).unwrap();
        for rowv in grad_logits.data().chunks(config.vocab_size) {
            for (g, x) in gb.data_mut().iter_mut().zip(rowv) {
                *g += x;
            }
        }
        *params = adam_step(adam, params, &grads, lr_map)?;
    }

    Ok((loss, correct, total_masked))
}

/// Pretrains the encoder with masked-token prediction: 15% of non-pad
/// tokens are replaced by the mask id and an auxiliary vocabulary-projection
/// head predicts the originals. The head is dropped from the returned
/// checkpoint. Zero epochs returns the initialized parameters verbatim.
pub fn pretrain(corpus: &Dataset, config: &ModelConfig, hyper: &TrainHyper) -> Result<PretrainOutcome> {
    config.validate()?;
    hyper.validate()?;
    corpus.validate()?;
    if corpus.is_empty() {
        return Err(YotoError::InvalidArgument("empty pretraining corpus".into()));
    }
    let vocab = build_vocab(&[corpus], config.vocab_size)?;
    if vocab.size() <= 3 {
        return Err(YotoError::Config(
            "vocabulary holds no real tokens to mask".into(),
        ));
    }
    if vocab.size() > config.vocab_size {
        return Err(YotoError::Config(format!(
            "vocabulary of {} ids exceeds config.vocab_size {}",
            vocab.size(),
            config.vocab_size
        )));
    }

    let heads = BTreeMap::from([(MLM_HEAD.to_string(), config.vocab_size)]);
    let mut params = init_params(
        config,
        &heads,
        &mut SeededRng::new(derive_seed(hyper.seed, STREAM_INIT)),
    )?;
    let mut adam = AdamState::new(&params);
    let lr_map = dual_lr_map(hyper);

    let seqs: Vec<Vec<u32>> = corpus
        .records
        .iter()
        .map(|r| vocab.tokenize(&r.func, config.max_len))
        .filter(|s| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(YotoError::InvalidArgument(
            "corpus tokenized to nothing".into(),
        ));
    }

    let mut log = TrainLog { rows: Vec::new() };
    for epoch in 0..hyper.epochs {
        let mut rng = SeededRng::new(derive_seed(hyper.seed, STREAM_PRETRAIN_EPOCH + epoch as u64));
        let mut loss_sum = 0.0f32;
        let mut correct = 0usize;
        let mut masked = 0usize;
        let batches = batched_indices(seqs.len(), hyper.batch_size, &mut rng);
        let n_batches = batches.len();
        for idx in batches {
            let batch_seqs: Vec<Vec<u32>> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let (loss, c, m) =
                mlm_step(&mut params, config, &mut adam, &lr_map, &batch_seqs, &mut rng, true)?;
            loss_sum += loss;
            correct += c;
            masked += m;
        }
        log.rows.push(EpochStat {
            epoch,
            loss: loss_sum / n_batches as f32,
            train_acc: correct as f64 / masked as f64,
        });
    }

    let mlm_w = params.remove(&format!("head.{MLM_HEAD}.w")).unwrap();
    let mlm_b = params.remove(&format!("head.{MLM_HEAD}.b")).unwrap();
    let checkpoint = Checkpoint::new(
        config.clone(),
        params,
        CheckpointMeta {
            role: Role::Pretrained,
            base_fingerprint: None,
            lineage: format!(
                "pretrain epochs={} batch={} seed={} corpus=[{}]",
                hyper.epochs, hyper.batch_size, hyper.seed, corpus.provenance
            ),
            lambda: None,
            seed: hyper.seed,
            vocab: Some(vocab),
            head_classes: BTreeMap::new(),
        },
    )?;
    Ok(PretrainOutcome {
        checkpoint,
        log,
        mlm_w,
        mlm_b,
    })
}

impl PretrainOutcome {
    /// Masked-token accuracy on held-out snippets, using the discarded
    /// vocabulary-projection head. Masking is seeded independently of
    /// training.
    pub fn masked_accuracy(&self, held_out: &Dataset, seed: u64) -> Result<f64> {
        let vocab = self
            .checkpoint
            .meta
            .vocab
            .as_ref()
            .expect("pretrain stores its vocab");
        let config = &self.checkpoint.config;
        let mut params = self.checkpoint.params.clone();
        params.set(&format!("head.{MLM_HEAD}.w"), self.mlm_w.clone())?;
        params.set(&format!("head.{MLM_HEAD}.b"), self.mlm_b.clone())?;

        let seqs: Vec<Vec<u32>> = held_out
            .records
            .iter()
            .map(|r| vocab.tokenize(&r.func, config.max_len))
            .filter(|s| !s.is_empty())
            .collect();
        let mut rng = SeededRng::new(seed);
        let mut adam = AdamState::new(&params);
        let lr_map = dual_lr_map(&TrainHyper::default());
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in seqs.chunks(32) {
            let (_, c, m) = mlm_step(
                &mut params,
                config,
                &mut adam,
                &lr_map,
                chunk,
                &mut rng,
                false,
            )?;
            correct += c;
            total += m;
        }
        Ok(correct as f64 / total as f64)
    }
}

// ───────────────────────── fine-tuning ─────────────────────────

/// Builds the class-weight vector: weight 1 for "none", `vul_class_weight`
/// for every vulnerability class.
pub fn class_weights(n_classes: usize, vul_class_weight: f32) -> Vec<f32> {
    let mut w = vec![vul_class_weight; n_classes];
    w[0] = 1.0;
    w
}

/// Independently fine-tunes a fresh classification head (plus the encoder)
/// on one dataset. The base checkpoint is untouched; the result records the
/// base fingerprint and dataset provenance.
pub fn finetune(
    base: &Checkpoint,
    dataset: &Dataset,
    head_id: &str,
    hyper: &TrainHyper,
) -> Result<(Checkpoint, TrainLog)> {
    hyper.validate()?;
    dataset.validate()?;
    if !matches!(base.meta.role, Role::Pretrained | Role::Merged) {
        return Err(YotoError::Config(format!(
            "fine-tuning expects a pretrained or merged base, got {}",
            base.meta.role
        )));
    }
    if dataset.class_names.len() < 2 {
        return Err(YotoError::InvalidArgument(
            "fine-tuning needs a dataset with at least two classes".into(),
        ));
    }
    model::validate_head_id(head_id)?;
    if base.params.has_head(head_id) {
        return Err(YotoError::HeadCollision(head_id.to_string()));
    }
    let vocab = base.meta.vocab.as_ref().ok_or_else(|| {
        YotoError::Config("base checkpoint carries no vocabulary".into())
    })?;

    let config = base.config.clone();
    let n_classes = dataset.class_names.len();
    let mut params = base.params.clone();
    let mut head_rng = SeededRng::new(derive_seed(hyper.seed, STREAM_HEAD));
    params.insert(
        &format!("head.{head_id}.w"),
        rng_normal(&mut head_rng, &[config.d_model, n_classes], 0.02)?,
    )?;
    params.insert(&format!("head.{head_id}.b"), Tensor::zeros(&[n_classes]))?;

    let mut adam = AdamState::new(&params);
    let lr_map = dual_lr_map(hyper);
    let weights = class_weights(n_classes, hyper.vul_class_weight);

    let mut seqs = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for (i, r) in dataset.records.iter().enumerate() {
        let s = vocab.tokenize(&r.func, config.max_len);
        if s.is_empty() {
            return Err(YotoError::InvalidArgument(format!(
                "record {i} tokenizes to nothing"
            )));
        }
        seqs.push(s);
        targets.push(r.target);
    }

    let mut log = TrainLog { rows: Vec::new() };
    for epoch in 0..hyper.epochs {
        let mut rng = SeededRng::new(derive_seed(hyper.seed, STREAM_FINETUNE_EPOCH + epoch as u64));
        let batches = batched_indices(seqs.len(), hyper.batch_size, &mut rng);
        let n_batches = batches.len();
        let mut loss_sum = 0.0f32;
        let mut correct = 0usize;
        for idx in batches {
            let batch_seqs: Vec<Vec<u32>> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let batch_targets: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let batch = Batch::from_sequences(&batch_seqs)?;
            let (logits, cache) = model::forward(&params, &config, &batch, head_id)?;
            let (loss, grad_logits) =
                weighted_cross_entropy(&logits, &batch_targets, &weights)?;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&batch_targets)
                .filter(|(p, t)| *p == *t)
                .count();
            let grads = model::backward(&params, &config, &cache, &grad_logits)?;
            params = adam_step(&mut adam, &params, &grads, &lr_map)?;
            loss_sum += loss;
        }
        log.rows.push(EpochStat {
            epoch,
            loss: loss_sum / n_batches as f32,
            train_acc: correct as f64 / seqs.len() as f64,
        });
    }

    let mut head_classes = base.meta.head_classes.clone();
    head_classes.insert(head_id.to_string(), dataset.class_names.clone());
    let checkpoint = Checkpoint::new(
        config,
        params,
        CheckpointMeta {
            role: Role::Finetuned,
            base_fingerprint: Some(fingerprint(&base.params).0),
            lineage: format!(
                "finetune head={head_id} epochs={} seed={} data=[{}] base=[{}]",
                hyper.epochs, hyper.seed, dataset.provenance, base.meta.lineage
            ),
            lambda: None,
            seed: hyper.seed,
            vocab: base.meta.vocab.clone(),
            head_classes,
        },
    )?;
    Ok((checkpoint, log))
}

/// Joint-training comparator: concatenate the parts (classes renumbered
/// 1..K) and fine-tune one (K+1)-class head on the result.
pub fn joint_train(
    base: &Checkpoint,
    parts: &[&Dataset],
    head_id: &str,
    hyper: &TrainHyper,
) -> Result<(Checkpoint, TrainLog)> {
    let total = concat_datasets(parts)?;
    finetune(base, &total, head_id, hyper)
}

/// Tokenizes a dataset with a checkpoint's vocabulary (shared helper for
/// evaluation paths).
pub fn tokenize_dataset(vocab: &Vocab, config: &ModelConfig, ds: &Dataset) -> Result<Vec<Vec<u32>>> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = vocab.tokenize(&r.func, config.max_len);
            if s.is_empty() {
                Err(YotoError::InvalidArgument(format!(
                    "record {i} tokenizes to nothing"
                )))
            } else {
                Ok(s)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, PatternFamily, PatternSpec};

    fn tiny_corpus(seed: u64) -> Dataset {
        let spec = CorpusSpec::new(
            vec![(
                "p1".into(),
                PatternSpec {
                    family: PatternFamily::UncheckedArith,
                    positives: 40,
                    negatives: 120,
                },
            )],
            seed,
        );
        generate_corpus(&spec).unwrap().remove("p1").unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 192,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_len: 64,
        }
    }

    #[test]
    fn wce_uniform_logits_closed_form() {
        let logits = Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap();
        let (loss, _) = weighted_cross_entropy(&logits, &[0], &[1.0, 1.0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn wce_saturated_logits_vanish() {
        let logits = Tensor::matrix(1, 2, vec![40.0, -40.0]).unwrap();
        let (loss, grad) = weighted_cross_entropy(&logits, &[0], &[1.0, 1.0]).unwrap();
        assert!(loss < 1e-6, "{loss}");
        assert!(grad.data().iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn wce_vul_weight_scales_gradient_five_fold() {
        // one batch, two rows with uniform identical logits, one per class;
        // with p = [0.5, 0.5] the |softmax − onehot| mass is the same for
        // both rows, so the row-gradient ratio is exactly the weight ratio
        let logits = Tensor::matrix(2, 2, vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let (_, grad) = weighted_cross_entropy(&logits, &[0, 1], &[1.0, 5.0]).unwrap();
        let mag = |row: &[f32]| row.iter().map(|g| g.abs()).sum::<f32>();
        let r0 = mag(grad.row(0));
        let r1 = mag(grad.row(1));
        assert!((r1 / r0 - 5.0).abs() < 1e-4, "ratio {}", r1 / r0);
    }

    #[test]
    fn wce_rejects_bad_targets() {
        let logits = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            weighted_cross_entropy(&logits, &[2], &[1.0, 1.0]),
            Err(YotoError::Index(_))
        ));
    }

    fn flat_params() -> NamedParams {
        let mut p = NamedParams::new();
        p.insert("encoder.a", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        p.insert("head.h.w", Tensor::vector(vec![0.5, 0.5, 0.5])).unwrap();
        p
    }

    #[test]
    fn adam_zero_gradients_keep_params() {
        let params = flat_params();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        let out = adam_step(&mut state, &params, &grads, &dual_lr_map(&TrainHyper::default()))
            .unwrap();
        assert_eq!(out, params);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // step 1 with fresh moments: delta = -lr * g / (|g| + eps)
        let params = flat_params();
        let mut grads = params.zeros_like();
        grads.set("encoder.a", Tensor::vector(vec![0.1, -0.4, 0.0])).unwrap();
        let mut state = AdamState::new(&params);
        let lr = 1e-3f32;
        let lr_map = BTreeMap::from([("encoder.".to_string(), lr), ("head.".to_string(), lr)]);
        let out = adam_step(&mut state, &params, &grads, &lr_map).unwrap();
        let before = params.get("encoder.a").unwrap();
        let after = out.get("encoder.a").unwrap();
        for i in 0..3 {
            let g = grads.get("encoder.a").unwrap().at(i);
            let expect = before.at(i) - lr * g / (g.abs() + state.eps);
            assert!(
                (after.at(i) - expect).abs() < 1e-9,
                "i={i}: {} vs {expect}",
                after.at(i)
            );
        }
    }

    #[test]
    fn adam_respects_prefix_rates() {
        let params = flat_params();
        let mut grads = params.zeros_like();
        grads.set("encoder.a", Tensor::vector(vec![0.2, 0.2, 0.2])).unwrap();
        grads.set("head.h.w", Tensor::vector(vec![0.2, 0.2, 0.2])).unwrap();
        let mut state = AdamState::new(&params);
        let lr_map = BTreeMap::from([
            ("encoder.".to_string(), 1e-4f32),
            ("head.".to_string(), 1e-2f32),
        ]);
        let out = adam_step(&mut state, &params, &grads, &lr_map).unwrap();
        let d_enc = (out.get("encoder.a").unwrap().at(0) - params.get("encoder.a").unwrap().at(0)).abs();
        let d_head = (out.get("head.h.w").unwrap().at(0) - params.get("head.h.w").unwrap().at(0)).abs();
        let ratio = d_head / d_enc;
        assert!((ratio - 100.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn adam_uncovered_prefix_is_config_error() {
        let params = flat_params();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        let lr_map = BTreeMap::from([("encoder.".to_string(), 1e-3f32)]);
        assert!(matches!(
            adam_step(&mut state, &params, &grads, &lr_map),
            Err(YotoError::Config(_))
        ));
    }

    #[test]
    fn pretrain_zero_epochs_returns_init_verbatim() {
        let corpus = tiny_corpus(3);
        let config = tiny_config();
        let hyper = TrainHyper::default().with_epochs(0);
        let out = pretrain(&corpus, &config, &hyper).unwrap();
        let heads = BTreeMap::from([(MLM_HEAD.to_string(), config.vocab_size)]);
        let mut expect = init_params(
            &config,
            &heads,
            &mut SeededRng::new(derive_seed(hyper.seed, STREAM_INIT)),
        )
        .unwrap();
        expect.remove("head.mlm.w");
        expect.remove("head.mlm.b");
        assert_eq!(out.checkpoint.params, expect);
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let corpus = tiny_corpus(5);
        let config = tiny_config();
        let hyper = TrainHyper::default().with_epochs(2);
        let a = pretrain(&corpus, &config, &hyper).unwrap();
        let b = pretrain(&corpus, &config, &hyper).unwrap();
        assert_eq!(a.checkpoint.fingerprint(), b.checkpoint.fingerprint());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn pretrain_beats_chance_on_held_out() {
        let corpus = tiny_corpus(7);
        let held_out = tiny_corpus(11);
        let config = tiny_config();
        let hyper = TrainHyper::default().with_epochs(4);
        let out = pretrain(&corpus, &config, &hyper).unwrap();
        let acc = out.masked_accuracy(&held_out, 99).unwrap();
        let chance = 1.0 / config.vocab_size as f64;
        assert!(acc > 10.0 * chance, "masked accuracy {acc} vs chance {chance}");
    }

    #[test]
    fn pretrain_rejects_tiny_vocab() {
        let corpus = tiny_corpus(3);
        let mut config = tiny_config();
        config.vocab_size = 3;
        assert!(matches!(
            pretrain(&corpus, &config, &TrainHyper::default()),
            Err(YotoError::Config(_))
        ));
    }

    #[test]
    fn finetune_learns_and_records_lineage() {
        let corpus = tiny_corpus(13);
        let config = tiny_config();
        let base = pretrain(&corpus, &config, &TrainHyper::default().with_epochs(2))
            .unwrap()
            .checkpoint;
        let (ft, log) = finetune(&base, &corpus, "p1", &TrainHyper::default()).unwrap();
        assert_eq!(ft.meta.role, Role::Finetuned);
        assert_eq!(
            ft.meta.base_fingerprint.as_deref(),
            Some(fingerprint(&base.params).0.as_str())
        );
        let final_acc = log.rows.last().unwrap().train_acc;
        assert!(final_acc >= 0.95, "train accuracy {final_acc}");
        let (first, last) = log.first_last_loss().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        // the base value is untouched
        assert_eq!(base.meta.role, Role::Pretrained);
        assert!(!base.params.has_head("p1"));
    }

    #[test]
    fn finetune_preconditions() {
        let corpus = tiny_corpus(17);
        let config = tiny_config();
        let base = pretrain(&corpus, &config, &TrainHyper::default().with_epochs(0))
            .unwrap()
            .checkpoint;

        // single-class dataset
        let single = Dataset::new(
            vec![crate::corpus::FuncRecord {
                func: "int f() { return 0; }".into(),
                target: 0,
                cwe: String::new(),
            }],
            vec!["none".into()],
            "single",
        )
        .unwrap();
        assert!(finetune(&base, &single, "h", &TrainHyper::default()).is_err());

        // head collision
        let (ft, _) = finetune(&base, &corpus, "p1", &TrainHyper::default().with_epochs(0)).unwrap();
        let merged_like = Checkpoint::new(
            ft.config.clone(),
            ft.params.clone(),
            CheckpointMeta {
                role: Role::Merged,
                ..ft.meta.clone()
            },
        )
        .unwrap();
        assert!(matches!(
            finetune(&merged_like, &corpus, "p1", &TrainHyper::default()),
            Err(YotoError::HeadCollision(_))
        ));

        // fine-tuning from a finetuned checkpoint is rejected
        assert!(matches!(
            finetune(&ft, &corpus, "p2", &TrainHyper::default()),
            Err(YotoError::Config(_))
        ));
    }

    #[test]
    fn joint_single_part_reduces_to_finetune() {
        let corpus = tiny_corpus(19);
        let config = tiny_config();
        let base = pretrain(&corpus, &config, &TrainHyper::default().with_epochs(1))
            .unwrap()
            .checkpoint;
        let hyper = TrainHyper::default().with_epochs(2);
        let (joint, _) = joint_train(&base, &[&corpus], "j", &hyper).unwrap();
        let (ft, _) = finetune(&base, &corpus, "j", &hyper).unwrap();
        assert_eq!(joint.params, ft.params);
    }

    #[test]
    fn joint_two_parts_builds_three_class_head() {
        let spec = CorpusSpec::new(
            vec![
                (
                    "a".into(),
                    PatternSpec {
                        family: PatternFamily::UncheckedArith,
                        positives: 20,
                        negatives: 60,
                    },
                ),
                (
                    "b".into(),
                    PatternSpec {
                        family: PatternFamily::ReachableAssert,
                        positives: 20,
                        negatives: 60,
                    },
                ),
            ],
            23,
        );
        let sets = generate_corpus(&spec).unwrap();
        let mix = concat_datasets(&[&sets["a"], &sets["b"]]).unwrap();
        let config = tiny_config();
        let base = pretrain(&mix, &config, &TrainHyper::default().with_epochs(1))
            .unwrap()
            .checkpoint;
        let (joint, _) = joint_train(
            &base,
            &[&sets["a"], &sets["b"]],
            "joint",
            &TrainHyper::default().with_epochs(1),
        )
        .unwrap();
        assert_eq!(joint.params.head_classes("joint").unwrap(), 3);
        assert_eq!(joint.meta.head_classes["joint"].len(), 3);
    }
}
