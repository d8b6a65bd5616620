//! Vul-Vector computation, algebra, scaling, application, and the
//! parameter-mean baseline.
//!
//! A Vul-Vector is the layer-wise delta `finetuned − base` over the
//! `encoder.*` parameters, bound to the fingerprint of the base it came
//! from. Vectors from one base add commutatively, scale by λ, and apply
//! back onto the base; classification heads are never merged — they travel
//! with their evaluation dataset in a [`HeadBank`]. Any algebra across
//! differing base fingerprints is rejected (param-mean excepted: the
//! baseline is defined without a base).

use std::collections::BTreeMap;

use crate::error::{Result, YotoError};
use crate::model::{ModelConfig, NamedParams};
use crate::store::{fingerprint, sha256_hex, Checkpoint, CheckpointMeta, Role};
use crate::tensor::{self, Tensor};

/// Layer-wise parameter delta over a base encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VulVector {
    pub config: ModelConfig,
    entries: BTreeMap<String, Tensor>,
    pub base_fingerprint: String,
    pub lineage: String,
}

impl VulVector {
    pub fn entries(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_compatible(&self, other: &VulVector, op: &str) -> Result<()> {
        if self.base_fingerprint != other.base_fingerprint {
            return Err(YotoError::Lineage(format!(
                "{op} across different bases ({}… vs {}…)",
                &self.base_fingerprint[..12.min(self.base_fingerprint.len())],
                &other.base_fingerprint[..12.min(other.base_fingerprint.len())]
            )));
        }
        if self.config != other.config {
            return Err(YotoError::ShapeMismatch {
                op: "vulvector schema",
                lhs: vec![self.entries.len()],
                rhs: vec![other.entries.len()],
            });
        }
        Ok(())
    }

    /// Ablation toggle: a copy with the token/positional embedding deltas
    /// zeroed, so only the block parameters merge. The default pipeline
    /// treats embeddings as feature-extraction layers and merges them.
    pub fn without_embeddings(&self) -> VulVector {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let t = if n.starts_with("encoder.embed.") {
                    Tensor::zeros(t.shape())
                } else {
                    t.clone()
                };
                (n.clone(), t)
            })
            .collect();
        VulVector {
            config: self.config.clone(),
            entries,
            base_fingerprint: self.base_fingerprint.clone(),
            lineage: format!("no-embed[{}]", self.lineage),
        }
    }

    /// Serializes as a checkpoint with role `vulvector` (same container
    /// format; entries are the `encoder.*` names).
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = NamedParams::new();
        for (name, t) in &self.entries {
            params.insert(name, t.clone())?;
        }
        Checkpoint::new(
            self.config.clone(),
            params,
            CheckpointMeta {
                role: Role::Vulvector,
                base_fingerprint: Some(self.base_fingerprint.clone()),
                lineage: self.lineage.clone(),
                lambda: None,
                seed: 0,
                vocab: None,
                head_classes: BTreeMap::new(),
            },
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<VulVector> {
        if ckpt.meta.role != Role::Vulvector {
            return Err(YotoError::Config(format!(
                "expected a vulvector checkpoint, got role {}",
                ckpt.meta.role
            )));
        }
        let entries = ckpt
            .params
            .encoder_iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Ok(VulVector {
            config: ckpt.config.clone(),
            entries,
            base_fingerprint: ckpt
                .meta
                .base_fingerprint
                .clone()
                .expect("validated by role invariant"),
            lineage: ckpt.meta.lineage.clone(),
        })
    }
}

/// `entry[name] = finetuned.encoder[name] − base.encoder[name]`. Heads are
/// excluded; the fine-tuned checkpoint must descend from exactly this base.
pub fn compute_vulvector(finetuned: &Checkpoint, base: &Checkpoint) -> Result<VulVector> {
    let base_fp = fingerprint(&base.params).0;
    match &finetuned.meta.base_fingerprint {
        Some(fp) if *fp == base_fp => {}
        Some(fp) => {
            return Err(YotoError::Lineage(format!(
                "checkpoint descends from {}…, not from the given base {}…",
                &fp[..12],
                &base_fp[..12]
            )))
        }
        None => {
            return Err(YotoError::Lineage(
                "checkpoint carries no base fingerprint".into(),
            ))
        }
    }
    if finetuned.config != base.config {
        return Err(YotoError::ShapeMismatch {
            op: "compute_vulvector",
            lhs: vec![finetuned.params.len()],
            rhs: vec![base.params.len()],
        });
    }
    let mut entries = BTreeMap::new();
    for (name, base_t) in base.params.encoder_iter() {
        let ft_t = finetuned.params.expect(name)?;
        entries.insert(name.clone(), tensor::sub(ft_t, base_t)?);
    }
    Ok(VulVector {
        config: base.config.clone(),
        entries,
        base_fingerprint: base_fp,
        lineage: format!("diff[{}]", finetuned.meta.lineage),
    })
}

/// Layer-wise addition of two Vul-Vectors from one base.
pub fn vv_add(a: &VulVector, b: &VulVector) -> Result<VulVector> {
    a.check_compatible(b, "vv_add")?;
    let mut entries = BTreeMap::new();
    for (name, ta) in &a.entries {
        let tb = b.entries.get(name).ok_or_else(|| YotoError::ShapeMismatch {
            op: "vv_add",
            lhs: vec![a.entries.len()],
            rhs: vec![b.entries.len()],
        })?;
        entries.insert(name.clone(), tensor::add(ta, tb)?);
    }
    Ok(VulVector {
        config: a.config.clone(),
        entries,
        base_fingerprint: a.base_fingerprint.clone(),
        lineage: format!("({} + {})", a.lineage, b.lineage),
    })
}

/// Left-to-right fold of [`vv_add`] in the given order.
pub fn vv_sum(vs: &[&VulVector]) -> Result<VulVector> {
    let (first, rest) = vs.split_first().ok_or_else(|| {
        YotoError::InvalidArgument("vv_sum of zero vectors".into())
    })?;
    let mut acc = (*first).clone();
    for v in rest {
        acc = vv_add(&acc, v)?;
    }
    Ok(acc)
}

/// Multiplies every entry by λ. λ = 0 yields exact (+0.0) zeros; λ = 1 is a
/// bitwise copy.
pub fn vv_scale(v: &VulVector, lambda: f32) -> VulVector {
    let entries = v
        .entries
        .iter()
        .map(|(n, t)| (n.clone(), tensor::scale(lambda, t)))
        .collect();
    VulVector {
        config: v.config.clone(),
        entries,
        base_fingerprint: v.base_fingerprint.clone(),
        lineage: format!("{lambda} * {}", v.lineage),
    }
}

/// Named classification heads to attach to a merged encoder, one per
/// evaluation dataset.
#[derive(Debug, Clone, Default)]
pub struct HeadBank {
    entries: BTreeMap<String, HeadEntry>,
}

#[derive(Debug, Clone)]
pub struct HeadEntry {
    pub w: Tensor,
    pub b: Tensor,
    pub class_names: Vec<String>,
}

impl HeadBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copies a head verbatim from its donor checkpoint.
    pub fn add_from(&mut self, donor: &Checkpoint, head_id: &str) -> Result<()> {
        let w = donor
            .params
            .get(&format!("head.{head_id}.w"))
            .ok_or_else(|| YotoError::MissingHead(head_id.to_string()))?;
        let b = donor.params.expect(&format!("head.{head_id}.b"))?;
        let class_names = donor
            .meta
            .head_classes
            .get(head_id)
            .ok_or_else(|| {
                YotoError::Invariant(format!("donor head '{head_id}' has no class names"))
            })?
            .clone();
        self.add(head_id, w.clone(), b.clone(), class_names)
    }

    pub fn add(
        &mut self,
        head_id: &str,
        w: Tensor,
        b: Tensor,
        class_names: Vec<String>,
    ) -> Result<()> {
        crate::model::validate_head_id(head_id)?;
        if self.entries.contains_key(head_id) {
            return Err(YotoError::HeadCollision(head_id.to_string()));
        }
        self.entries.insert(
            head_id.to_string(),
            HeadEntry { w, b, class_names },
        );
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &HeadEntry)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `merged.encoder = base.encoder + v`, with the bank's heads attached
/// verbatim. An all-zero-bits vector tensor short-circuits to a bitwise
/// copy of the base tensor, so a λ=0 merge is bit-identical to the base.
pub fn apply(base: &Checkpoint, v: &VulVector, heads: &HeadBank) -> Result<Checkpoint> {
    let base_fp = fingerprint(&base.params).0;
    if v.base_fingerprint != base_fp {
        return Err(YotoError::Lineage(format!(
            "vector was taken against {}…, base is {}…",
            &v.base_fingerprint[..12],
            &base_fp[..12]
        )));
    }
    if v.config != base.config {
        return Err(YotoError::ShapeMismatch {
            op: "apply",
            lhs: vec![v.entries.len()],
            rhs: vec![base.params.len()],
        });
    }
    let mut params = NamedParams::new();
    for (name, base_t) in base.params.encoder_iter() {
        let delta = v.entries.get(name).ok_or_else(|| YotoError::ShapeMismatch {
            op: "apply",
            lhs: vec![v.entries.len()],
            rhs: vec![base.params.len()],
        })?;
        let merged = if delta.is_bitwise_zero() {
            base_t.clone()
        } else {
            tensor::add(base_t, delta)?
        };
        params.insert(name, merged)?;
    }
    let mut head_classes = BTreeMap::new();
    for (id, head) in heads.iter() {
        params.insert(&format!("head.{id}.w"), head.w.clone())?;
        params.insert(&format!("head.{id}.b"), head.b.clone())?;
        head_classes.insert(id.clone(), head.class_names.clone());
    }
    Checkpoint::new(
        base.config.clone(),
        params,
        CheckpointMeta {
            role: Role::Merged,
            base_fingerprint: Some(base_fp),
            lineage: format!("apply[{}] onto [{}]", v.lineage, base.meta.lineage),
            lambda: None,
            seed: base.meta.seed,
            vocab: base.meta.vocab.clone(),
            head_classes,
        },
    )
}

/// The full merge recipe: `base + λ · Σ sources`, λ applied once to the
/// summed vector, λ recorded in the result's metadata.
pub fn merge(
    base: &Checkpoint,
    sources: &[&VulVector],
    lambda: f32,
    heads: &HeadBank,
) -> Result<Checkpoint> {
    let total = vv_sum(sources)?;
    let mut merged = apply(base, &vv_scale(&total, lambda), heads)?;
    merged.meta.lambda = Some(lambda);
    Ok(merged)
}

/// Parameter-mean baseline: per-name arithmetic mean of the encoder
/// tensors, summed in input order then divided by the model count. Heads
/// are attached verbatim as in [`apply`]; a head id provided by two inputs
/// is a name error. This baseline is defined without a base: differing base
/// fingerprints are allowed, and the output records the common ancestor if
/// one exists, otherwise a digest over the inputs' own fingerprints.
pub fn param_mean(checkpoints: &[&Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.len() < 2 {
        return Err(YotoError::InvalidArgument(
            "param_mean needs at least two checkpoints".into(),
        ));
    }
    let first = checkpoints[0];
    for c in &checkpoints[1..] {
        if c.config != first.config {
            return Err(YotoError::ShapeMismatch {
                op: "param_mean",
                lhs: vec![first.params.len()],
                rhs: vec![c.params.len()],
            });
        }
    }
    let n = checkpoints.len() as f32;
    let mut params = NamedParams::new();
    for (name, t0) in first.params.encoder_iter() {
        let mut acc = t0.clone();
        for c in &checkpoints[1..] {
            acc = tensor::add(&acc, c.params.expect(name)?)?;
        }
        params.insert(name, tensor::scale(1.0 / n, &acc))?;
    }

    let mut head_classes = BTreeMap::new();
    for c in checkpoints {
        for id in c.params.head_ids() {
            let w_name = format!("head.{id}.w");
            if params.get(&w_name).is_some() {
                return Err(YotoError::HeadCollision(id));
            }
            params.insert(&w_name, c.params.expect(&w_name)?.clone())?;
            let b_name = format!("head.{id}.b");
            params.insert(&b_name, c.params.expect(&b_name)?.clone())?;
            head_classes.insert(
                id.clone(),
                c.meta
                    .head_classes
                    .get(&id)
                    .ok_or_else(|| {
                        YotoError::Invariant(format!("head '{id}' has no class names"))
                    })?
                    .clone(),
            );
        }
    }

    let bases: Vec<&String> = checkpoints
        .iter()
        .filter_map(|c| c.meta.base_fingerprint.as_ref())
        .collect();
    let base_fingerprint = if bases.len() == checkpoints.len()
        && bases.windows(2).all(|w| w[0] == w[1])
    {
        bases[0].clone()
    } else {
        let joined: String = checkpoints
            .iter()
            .map(|c| fingerprint(&c.params).0)
            .collect();
        sha256_hex(joined.as_bytes())
    };

    let vocab = checkpoints.iter().find_map(|c| c.meta.vocab.clone());
    Checkpoint::new(
        first.config.clone(),
        params,
        CheckpointMeta {
            role: Role::Merged,
            base_fingerprint: Some(base_fingerprint),
            lineage: format!(
                "param-mean of {} checkpoints [{}]",
                checkpoints.len(),
                checkpoints
                    .iter()
                    .map(|c| c.meta.lineage.as_str())
                    .collect::<Vec<_>>()
                    .join(" | ")
            ),
            lambda: None,
            seed: first.meta.seed,
            vocab,
            head_classes,
        },
    )
}
