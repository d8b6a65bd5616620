//! Checkpoints, fingerprints, and the single-file container format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic     5 bytes  "YOTO1"
//! version   u32      1
//! hdr_len   u64      length of the JSON header in bytes
//! header    JSON     { config, meta, encoder_fingerprint,
//!                      tensors: name → { shape, offset, len } }
//! payload   f32 LE   tensor data back to back, index (lexicographic) order;
//!                    offsets/lengths in the index are payload-relative bytes
//! checksum  u64      first 8 bytes of SHA-256(header ‖ payload)
//! ```
//!
//! The JSON header alone suffices to list tensors without touching the
//! payload. Writers create a temp file and atomically rename; files are
//! immutable afterwards.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::error::{Result, YotoError};
use crate::model::{validate_schema, ModelConfig, NamedParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"YOTO1";
pub const FORMAT_VERSION: u32 = 1;

/// What a stored parameter set is: a pre-trained base, an independent
/// fine-tune, a merged model, or a Vul-Vector delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrained,
    Finetuned,
    Merged,
    Vulvector,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Pretrained => "pretrained",
            Role::Finetuned => "finetuned",
            Role::Merged => "merged",
            Role::Vulvector => "vulvector",
        };
        f.write_str(s)
    }
}

/// Lineage metadata carried by every checkpoint. `vocab` and `head_classes`
/// make checkpoints self-contained for downstream tokenization and
/// per-dataset head evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub role: Role,
    pub base_fingerprint: Option<String>,
    pub lineage: String,
    pub lambda: Option<f32>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub head_classes: BTreeMap<String, Vec<String>>,
}

/// Model config + named parameters (encoder and head bank) + metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: NamedParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: NamedParams, meta: CheckpointMeta) -> Result<Self> {
        let ckpt = Checkpoint {
            config,
            params,
            meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        validate_schema(&self.params, &self.config)?;
        match self.meta.role {
            Role::Pretrained => {
                if self.meta.base_fingerprint.is_some() {
                    return Err(YotoError::Invariant(
                        "pretrained checkpoints must not carry a base fingerprint".into(),
                    ));
                }
            }
            Role::Finetuned | Role::Merged | Role::Vulvector => {
                if self.meta.base_fingerprint.is_none() {
                    return Err(YotoError::Invariant(format!(
                        "{} checkpoints require a base fingerprint",
                        self.meta.role
                    )));
                }
            }
        }
        for id in self.params.head_ids() {
            let classes = self.params.head_classes(&id)?;
            match self.meta.head_classes.get(&id) {
                Some(names) if names.len() == classes => {}
                Some(names) => {
                    return Err(YotoError::Invariant(format!(
                        "head '{id}' has {classes} classes but {} class names",
                        names.len()
                    )))
                }
                None => {
                    return Err(YotoError::Invariant(format!(
                        "head '{id}' has no class-name metadata"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint(&self.params)
    }
}

/// Hex SHA-256 digest over the canonical encoder-parameter bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint(pub String);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Digest of the `encoder.*` entries in lexicographic name order. Each
/// entry contributes its name bytes, a 0x00 separator, the rank as u32 LE,
/// each dimension as u64 LE, then the element data as f32 LE. Head-bank
/// contents never affect the digest.
pub fn fingerprint(params: &NamedParams) -> Fingerprint {
    let mut hasher = Sha256::new();
    for (name, tensor) in params.encoder_iter() {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    Fingerprint(hex_string(&digest))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 hex of arbitrary bytes (manifest input digests).
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

// ───────────────────────── container codec ─────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndexEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderDoc {
    config: ModelConfig,
    meta: CheckpointMeta,
    encoder_fingerprint: String,
    tensors: BTreeMap<String, TensorIndexEntry>,
}

fn checksum64(header: &[u8], payload: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(header);
    hasher.update(payload);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn io_err(path: &Path, source: std::io::Error) -> YotoError {
    YotoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes a checkpoint to the container format (temp file + atomic
/// rename). `load(save(x)) == x` bit-exactly, metadata included.
pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ckpt.validate()?;

    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, tensor) in ckpt.params.iter() {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.clone(),
            TensorIndexEntry {
                shape: tensor.shape().to_vec(),
                offset,
                len: payload.len() as u64 - offset,
            },
        );
    }
    let header = HeaderDoc {
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        encoder_fingerprint: fingerprint(&ckpt.params).0,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization");

    let mut out =
        Vec::with_capacity(MAGIC.len() + 12 + header_bytes.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum64(&header_bytes, &payload).to_le_bytes());

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, &out).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

struct RawContainer {
    header: HeaderDoc,
    header_bytes: Vec<u8>,
    payload_start: usize,
    payload_len: usize,
    bytes: Vec<u8>,
}

fn read_container(path: &Path) -> Result<RawContainer> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let fixed = MAGIC.len() + 4 + 8;
    if bytes.len() < fixed + 8 {
        return Err(YotoError::Integrity(format!(
            "{}: file shorter than the fixed container frame",
            path.display()
        )));
    }
    if &bytes[..5] != MAGIC {
        return Err(YotoError::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &bytes[..5]
        )));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(YotoError::Format(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let hdr_len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let payload_start = fixed + hdr_len;
    if bytes.len() < payload_start + 8 {
        return Err(YotoError::Integrity(format!(
            "{}: truncated header (expects {hdr_len} bytes)",
            path.display()
        )));
    }
    let header_bytes = bytes[fixed..payload_start].to_vec();
    let payload_len = bytes.len() - payload_start - 8;
    let header: HeaderDoc = serde_json::from_slice(&header_bytes).map_err(|e| {
        YotoError::Format(format!("{}: undecodable header: {e}", path.display()))
    })?;

    // a truncated or padded payload is an integrity problem, distinct from
    // a checksum (corruption) failure over a structurally complete file
    let expected_payload: u64 = header
        .tensors
        .values()
        .map(|e| e.offset + e.len)
        .max()
        .unwrap_or(0);
    if payload_len as u64 != expected_payload {
        return Err(YotoError::Integrity(format!(
            "{}: payload holds {payload_len} bytes, index expects {expected_payload}",
            path.display()
        )));
    }

    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = checksum64(
        &header_bytes,
        &bytes[payload_start..payload_start + payload_len],
    );
    if stored != computed {
        return Err(YotoError::Corruption(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {computed:016x})",
            path.display()
        )));
    }
    Ok(RawContainer {
        header,
        header_bytes,
        payload_start,
        payload_len,
        bytes,
    })
}

/// Reads only the JSON index: (config, metadata, tensor index). Payload is
/// validated by checksum but never decoded.
pub fn read_index(
    path: impl AsRef<Path>,
) -> Result<(ModelConfig, CheckpointMeta, BTreeMap<String, TensorIndexEntry>)> {
    let raw = read_container(path.as_ref())?;
    let _ = raw.header_bytes;
    Ok((raw.header.config, raw.header.meta, raw.header.tensors))
}

/// Loads a checkpoint, verifying checksum, schema, and the stored encoder
/// fingerprint.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let raw = read_container(path)?;

    let payload = &raw.bytes[raw.payload_start..raw.payload_start + raw.payload_len];
    let mut params = NamedParams::new();
    for (name, entry) in &raw.header.tensors {
        let expect: usize = entry.shape.iter().product::<usize>() * 4;
        if entry.len as usize != expect {
            return Err(YotoError::Integrity(format!(
                "{}: tensor '{name}' length {} does not match shape {:?}",
                path.display(),
                entry.len,
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > payload.len() {
            return Err(YotoError::Integrity(format!(
                "{}: tensor '{name}' extends past the payload",
                path.display()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(entry.shape.clone(), data)?)?;
    }

    let ckpt = Checkpoint::new(raw.header.config, params, raw.header.meta)?;
    let recomputed = fingerprint(&ckpt.params).0;
    if recomputed != raw.header.encoder_fingerprint {
        return Err(YotoError::Corruption(format!(
            "{}: encoder fingerprint mismatch after load",
            path.display()
        )));
    }
    Ok(ckpt)
}
