//! Datasets of function-level code snippets: synthetic corpus generation,
//! JSONL ingestion, tokenization, concatenation, and splitting.
//!
//! The synthetic generator emits templated C-like functions. Each pattern
//! family plants one token-level signature idiom in its positive snippets
//! (an unchecked-arithmetic line, a reachable assertion, an unreleased
//! handle acquisition, a privilege call); negatives are the same templates
//! without the idiom. The filler pools are shared across families, so the
//! signature is the only systematic difference — detection difficulty is
//! not the point, merge behavior is.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, YotoError};
use crate::rng::{derive_seed, SeededRng};

/// One function-level snippet. `target == 0` means "no vulnerability" and
/// requires an empty `cwe`; any positive target carries its CWE label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuncRecord {
    pub func: String,
    pub target: usize,
    pub cwe: String,
}

/// A labeled dataset. Class id 0 is always "none"; ids >= 1 are CWE labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<FuncRecord>,
    pub class_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        records: Vec<FuncRecord>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            records,
            class_names,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() || self.class_names[0] != "none" {
            return Err(YotoError::Invariant(
                "class id 0 must be named 'none'".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return Err(YotoError::Invariant(format!(
                    "duplicate class name '{name}'"
                )));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.target >= self.class_names.len() {
                return Err(YotoError::Invariant(format!(
                    "record {i} has target {} but only {} class names",
                    r.target,
                    self.class_names.len()
                )));
            }
            if (r.target == 0) != r.cwe.is_empty() {
                return Err(YotoError::Invariant(format!(
                    "record {i}: target 0 must pair with an empty cwe and vice versa"
                )));
            }
            if r.target > 0 && r.cwe != self.class_names[r.target] {
                return Err(YotoError::Invariant(format!(
                    "record {i}: cwe '{}' does not match class '{}'",
                    r.cwe, self.class_names[r.target]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.target).collect()
    }

    /// Records equal and class names equal; provenance is ignored.
    pub fn same_content(&self, other: &Dataset) -> bool {
        self.records == other.records && self.class_names == other.class_names
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }
}

/// Split-role tag parsed from a dataset's provenance text (`split=train`,
/// `split=val`, or `split=test`, appended by [`split`]).
pub fn split_role(provenance: &str) -> Option<&str> {
    provenance
        .rfind("split=")
        .map(|i| {
            let rest = &provenance[i + 6..];
            rest.split_whitespace().next().unwrap_or(rest)
        })
        .filter(|role| !role.is_empty())
}

// ───────────────────────── synthetic generation ─────────────────────────

/// The four synthetic signature families, mirroring the flavor of
/// CWE-190 / CWE-617 / CWE-772 / CWE-269.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternFamily {
    /// Unchecked arithmetic accumulation (integer-overflow flavor).
    UncheckedArith,
    /// Reachable assertion on external state.
    ReachableAssert,
    /// Handle acquired and never released.
    UnreleasedHandle,
    /// Direct privilege elevation call.
    PrivilegeCall,
}

impl PatternFamily {
    pub fn cwe(&self) -> &'static str {
        match self {
            PatternFamily::UncheckedArith => "CWE-190",
            PatternFamily::ReachableAssert => "CWE-617",
            PatternFamily::UnreleasedHandle => "CWE-772",
            PatternFamily::PrivilegeCall => "CWE-269",
        }
    }

    fn signature_line(&self) -> &'static str {
        match self {
            PatternFamily::UncheckedArith => "out_len = out_len + hdr_len * rec_cnt;",
            PatternFamily::ReachableAssert => "assert(ring_slot != watermark);",
            PatternFamily::UnreleasedHandle => "fd_ref = acquire_handle(pool_tag);",
            PatternFamily::PrivilegeCall => "elevate_priv(root_ctx, MODE_SUID);",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unchecked-arith" | "CWE-190" => Ok(PatternFamily::UncheckedArith),
            "reachable-assert" | "CWE-617" => Ok(PatternFamily::ReachableAssert),
            "unreleased-handle" | "CWE-772" => Ok(PatternFamily::UnreleasedHandle),
            "privilege-call" | "CWE-269" => Ok(PatternFamily::PrivilegeCall),
            other => Err(YotoError::InvalidArgument(format!(
                "unknown pattern family '{other}'"
            ))),
        }
    }
}

/// Positive/negative counts for one synthetic pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub family: PatternFamily,
    pub positives: usize,
    pub negatives: usize,
}

/// Full generation request: one (pattern id → spec) list, a seed, and the
/// fraction of positives that actually carry the signature (1.0 default).
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub patterns: Vec<(String, PatternSpec)>,
    pub seed: u64,
    pub signature_rate: f64,
}

impl CorpusSpec {
    pub fn new(patterns: Vec<(String, PatternSpec)>, seed: u64) -> Self {
        CorpusSpec {
            patterns,
            seed,
            signature_rate: 1.0,
        }
    }

    /// The four-pattern corpus at one tenth of the reference dataset sizes
    /// (674/9760, 162/3492, 100/1439, 111/1839).
    pub fn reference_tenth(seed: u64) -> Self {
        let mk = |family, positives, negatives| PatternSpec {
            family,
            positives,
            negatives,
        };
        CorpusSpec::new(
            vec![
                ("p190".into(), mk(PatternFamily::UncheckedArith, 67, 909)),
                ("p617".into(), mk(PatternFamily::ReachableAssert, 16, 333)),
                ("p772".into(), mk(PatternFamily::UnreleasedHandle, 10, 134)),
                ("p269".into(), mk(PatternFamily::PrivilegeCall, 11, 173)),
            ],
            seed,
        )
    }
}

const RET_TYPES: [&str; 4] = ["int", "long", "size_t", "unsigned"];
const FN_NAMES: [&str; 12] = [
    "parse_frame",
    "read_chunk",
    "scan_table",
    "copy_span",
    "update_index",
    "check_bounds",
    "emit_packet",
    "flush_queue",
    "walk_nodes",
    "load_entry",
    "sync_state",
    "map_region",
];
const PARAM_LISTS: [&str; 4] = [
    "char *buf, int n",
    "const char *src, size_t n",
    "int fd, int n",
    "struct ctx *c, int n",
];
const DECLS: [&str; 4] = [
    "int i = 0;",
    "int rc = 0;",
    "size_t off = 0;",
    "int tmp = 0;",
];
const FILLERS: [&str; 8] = [
    "for (i = 0; i < n; i++) { rc += buf[i]; }",
    "if (rc < 0) { return rc; }",
    "off = off + 1;",
    "tmp = buf[off];",
    "log_trace(\"step\");",
    "memset(scratch, 0, sizeof(scratch));",
    "while (tmp > 0) { tmp--; }",
    "rc = helper_call(buf, n);",
];
const CLOSERS: [&str; 3] = ["return rc;", "return 0;", "return tmp;"];

fn render_snippet(rng: &mut SeededRng, signature: Option<&'static str>) -> String {
    let ret = RET_TYPES[rng.next_below(RET_TYPES.len())];
    let name = FN_NAMES[rng.next_below(FN_NAMES.len())];
    let params = PARAM_LISTS[rng.next_below(PARAM_LISTS.len())];

    let n_decls = 1 + rng.next_below(2);
    let mut decls = Vec::with_capacity(n_decls);
    for _ in 0..n_decls {
        decls.push(DECLS[rng.next_below(DECLS.len())]);
    }
    let n_fill = 2 + rng.next_below(3);
    let mut body: Vec<&str> = Vec::with_capacity(n_fill + 1);
    for _ in 0..n_fill {
        body.push(FILLERS[rng.next_below(FILLERS.len())]);
    }
    // The signature slot is drawn even for negatives so that positives and
    // negatives consume the identical rng stream and share templates.
    let slot = rng.next_below(body.len() + 1);
    if let Some(sig) = signature {
        body.insert(slot, sig);
    }
    let closer = CLOSERS[rng.next_below(CLOSERS.len())];

    let mut out = String::new();
    let _ = writeln!(out, "{ret} {name}({params}) {{");
    for d in decls {
        let _ = writeln!(out, "    {d}");
    }
    for line in body {
        let _ = writeln!(out, "    {line}");
    }
    let _ = writeln!(out, "    {closer}");
    out.push('}');
    out
}

/// Generates one binary dataset per pattern id. Positives come first, then
/// negatives; ordering inside a dataset is deterministic under the seed, so
/// two calls with the same spec are byte-identical.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<BTreeMap<String, Dataset>> {
    if !(0.0..=1.0).contains(&spec.signature_rate) {
        return Err(YotoError::InvalidArgument(format!(
            "signature_rate must be in [0,1], got {}",
            spec.signature_rate
        )));
    }
    let mut out = BTreeMap::new();
    for (idx, (id, pat)) in spec.patterns.iter().enumerate() {
        if pat.positives < 1 || pat.negatives < 1 {
            return Err(YotoError::InvalidArgument(format!(
                "pattern '{id}' needs at least one positive and one negative"
            )));
        }
        if out.contains_key(id) {
            return Err(YotoError::Conflict(format!("duplicate pattern id '{id}'")));
        }
        let mut rng = SeededRng::new(derive_seed(spec.seed, idx as u64));
        let cwe = pat.family.cwe().to_string();
        let mut records = Vec::with_capacity(pat.positives + pat.negatives);
        for _ in 0..pat.positives {
            let with_sig = rng.next_f64() < spec.signature_rate;
            let sig = with_sig.then(|| pat.family.signature_line());
            records.push(FuncRecord {
                func: render_snippet(&mut rng, sig),
                target: 1,
                cwe: cwe.clone(),
            });
        }
        for _ in 0..pat.negatives {
            // burn the signature coin so negatives share the positive stream
            let _ = rng.next_f64();
            records.push(FuncRecord {
                func: render_snippet(&mut rng, None),
                target: 0,
                cwe: String::new(),
            });
        }
        let ds = Dataset::new(
            records,
            vec!["none".into(), cwe],
            format!("synthetic:{id} seed={}", spec.seed),
        )?;
        out.insert(id.clone(), ds);
    }
    Ok(out)
}

// ───────────────────────── JSONL ingestion ─────────────────────────

pub const DATASET_SCHEMA: &str = "yoto-dataset/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlHeader {
    schema: String,
    classes: Vec<String>,
}

/// Writes the dataset as JSONL: a header line
/// `{"schema":"yoto-dataset/1","classes":[...]}` followed by one record
/// object per line, UTF-8, `\n` endings.
pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let path = path.as_ref();
    let mut out = String::new();
    let header = JsonlHeader {
        schema: DATASET_SCHEMA.into(),
        classes: ds.class_names.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serialization"));
    out.push('\n');
    for r in &ds.records {
        out.push_str(&serde_json::to_string(r).expect("record serialization"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| YotoError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a JSONL dataset saved by [`save_jsonl`]. Parse failures carry the
/// 1-based line number; an unknown schema string is a version error.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| YotoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| YotoError::Parse {
        line: 1,
        msg: "missing header line".into(),
    })?;
    let header: JsonlHeader = serde_json::from_str(header_line).map_err(|e| YotoError::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema != DATASET_SCHEMA {
        return Err(YotoError::Version(header.schema));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FuncRecord = serde_json::from_str(line).map_err(|e| YotoError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Dataset::new(records, header.classes, path.display().to_string())
}

// ───────────────────────── dataset algebra ─────────────────────────

/// Concatenates datasets into one multi-class dataset. Class 0 stays 0;
/// vulnerability classes are renumbered 1..K in part order. A CWE label
/// appearing in two parts is a conflict.
pub fn concat_datasets(parts: &[&Dataset]) -> Result<Dataset> {
    if parts.is_empty() {
        return Err(YotoError::InvalidArgument("concat of zero datasets".into()));
    }
    let mut class_names: Vec<String> = vec!["none".into()];
    let mut records = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    let mut sources = Vec::with_capacity(parts.len());
    for part in parts {
        part.validate()?;
        let offset = class_names.len() - 1;
        for name in &part.class_names[1..] {
            if class_names.contains(name) {
                return Err(YotoError::Conflict(format!(
                    "class '{name}' appears in more than one part"
                )));
            }
            class_names.push(name.clone());
        }
        for r in &part.records {
            let target = if r.target == 0 { 0 } else { r.target + offset };
            records.push(FuncRecord {
                func: r.func.clone(),
                target,
                cwe: r.cwe.clone(),
            });
        }
        sources.push(part.provenance.clone());
    }
    Dataset::new(
        records,
        class_names,
        format!("concat({})", sources.join(", ")),
    )
}

// ───────────────────────── vocabulary ─────────────────────────

/// Reserved token ids.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
const RESERVED: usize = 3;

/// Token → id map built deterministically from a corpus: tokens ranked by
/// (count desc, token asc), ids handed out from 3 upward. Ids 0/1/2 are
/// pad / unknown / mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

/// Splits code text into tokens: runs of `[A-Za-z0-9_]` stay whole,
/// whitespace separates, and every other character is its own token.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let word = c.is_ascii_alphanumeric() || c == '_';
        if word {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    debug_assert!(out.iter().all(|t| !t.is_empty()), "{bytes:?}");
    out
}

/// Builds a vocabulary of at most `max_size` ids (reserved ids included)
/// from the given datasets.
pub fn build_vocab(datasets: &[&Dataset], max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED {
        return Err(YotoError::Config(format!(
            "vocab size {max_size} leaves no room beyond the {RESERVED} reserved ids"
        )));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for ds in datasets {
        for r in &ds.records {
            for tok in split_tokens(&r.func) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = ranked
        .into_iter()
        .take(max_size - RESERVED)
        .map(|(t, _)| t.to_string())
        .collect();
    Ok(Vocab { tokens })
}

impl Vocab {
    /// Total id count including the reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| (i + RESERVED) as u32)
            .unwrap_or(UNK_ID)
    }

    /// Token ids for a snippet, truncated to `max_len`. Unknown tokens map
    /// to [`UNK_ID`].
    pub fn tokenize(&self, func: &str, max_len: usize) -> Vec<u32> {
        split_tokens(func)
            .into_iter()
            .take(max_len)
            .map(|t| self.id_of(t))
            .collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            MASK_ID => Some("<mask>"),
            _ => self.tokens.get(id as usize - RESERVED).map(String::as_str),
        }
    }
}

// ───────────────────────── splitting ─────────────────────────

/// Output of [`split`]: the three role-tagged partitions plus any
/// stratification warnings (classes too small to reach every split).
#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Deterministic stratified split. Ratios must each be positive and sum
/// to 1. Per class, records are shuffled by a class-derived seed and cut by
/// floor(train), floor(val), remainder(test), which preserves class
/// proportions within one record.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitSets> {
    let (rt, rv, rte) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rte <= 0.0 {
        return Err(YotoError::InvalidArgument(format!(
            "all split ratios must be positive, got {ratios:?}"
        )));
    }
    if (rt + rv + rte - 1.0).abs() > 1e-9 {
        return Err(YotoError::InvalidArgument(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    ds.validate()?;

    let mut warnings = Vec::new();
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..ds.class_names.len() {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.records[i].target == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let mut rng = SeededRng::new(derive_seed(seed, 101 + class as u64));
        rng.shuffle(&mut idx);
        let n_train = (n as f64 * rt).floor() as usize;
        let n_val = (n as f64 * rv).floor() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            warnings.push(format!(
                "class '{}' has {n} records; some splits receive none of it",
                ds.class_names[class]
            ));
        }
        parts[0].extend(&idx[..n_train]);
        parts[1].extend(&idx[n_train..n_train + n_val]);
        parts[2].extend(&idx[n_train + n_val..]);
    }

    let take = |indices: &[usize], role: &str| {
        let records = indices.iter().map(|&i| ds.records[i].clone()).collect();
        Dataset::new(
            records,
            ds.class_names.clone(),
            format!("{} split={role}", ds.provenance),
        )
    };
    Ok(SplitSets {
        train: take(&parts[0], "train")?,
        val: take(&parts[1], "val")?,
        test: take(&parts[2], "test")?,
        warnings,
    })
}
