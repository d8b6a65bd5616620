//! `yoto` — train, diff, merge, and evaluate vulnerability classifiers.
//!
//! Every command is a pure function of its inputs and the seeds in play:
//! rerunning with the same manifest inputs reproduces byte-identical
//! outputs. Each run writes a JSON manifest (command, input digests, seeds,
//! outputs) beside its outputs.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;
use yoto_core::corpus::{self, CorpusSpec, Dataset, FuncRecord, PatternFamily, PatternSpec};
use yoto_core::eval::{
    self, cross_eval, emit_report, select_lambda, EvalTarget, MetricScheme, Report, ReportRow,
    ScenarioKind, ScenarioSpec,
};
use yoto_core::model::ModelConfig;
use yoto_core::store::{self, sha256_hex, Checkpoint};
use yoto_core::train::{self, TrainHyper};
use yoto_core::vulvec::{self, HeadBank, VulVector};

#[derive(Parser)]
#[command(name = "yoto", version, about = "Vul-Vector parameter fusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic vulnerability datasets (JSONL).
    GenCorpus(GenCorpusArgs),
    /// Pretrain the shared encoder on a corpus mix (masked tokens).
    Pretrain(PretrainArgs),
    /// Fine-tune one classification head on one dataset.
    Finetune(FinetuneArgs),
    /// Train the joint comparator on concatenated datasets.
    JointTrain(JointTrainArgs),
    /// Vul-Vector algebra on checkpoint files.
    #[command(subcommand)]
    Vec(VecCommand),
    /// Evaluate a checkpoint head on a dataset.
    Eval(EvalArgs),
    /// Sweep a λ grid on validation datasets and report the winner.
    SelectLambda(SelectLambdaArgs),
    /// Run a scripted experiment protocol end to end.
    Scenario(ScenarioArgs),
}

#[derive(Subcommand)]
enum VecCommand {
    /// Vul-Vector of a fine-tuned checkpoint against its base.
    Diff(VecDiffArgs),
    /// Add Vul-Vectors sharing one base.
    Add(VecAddArgs),
    /// Scale a Vul-Vector by λ.
    Scale(VecScaleArgs),
    /// Apply λ·(sum of vectors) onto the base and attach heads.
    Apply(VecApplyArgs),
    /// Parameter-mean baseline over checkpoints.
    Mean(VecMeanArgs),
}

// ───────────────────────── shared plumbing ─────────────────────────

#[derive(Serialize)]
struct Manifest {
    command: String,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    outputs: Vec<String>,
}

struct RunContext {
    command: String,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    outputs: Vec<String>,
}

impl RunContext {
    fn new(command: &str) -> Self {
        RunContext {
            command: command.to_string(),
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading input {}", path.display()))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<anchor>.manifest.json` for file outputs or
    /// `<anchor>/manifest.json` for directory outputs.
    fn finish(mut self, anchor: &Path) -> Result<()> {
        let manifest_path = if anchor.is_dir() {
            anchor.join("manifest.json")
        } else {
            anchor.with_extension(format!(
                "{}manifest.json",
                anchor
                    .extension()
                    .map(|e| format!("{}.", e.to_string_lossy()))
                    .unwrap_or_default()
            ))
        };
        self.outputs.sort();
        let manifest = Manifest {
            command: self.command,
            inputs: self.inputs,
            seeds: self.seeds,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&manifest_path, text)
            .with_context(|| format!("writing manifest {}", manifest_path.display()))?;
        Ok(())
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    store::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path, ctx: &mut RunContext) -> Result<()> {
    store::save(ckpt, path).with_context(|| format!("writing checkpoint {}", path.display()))?;
    ctx.output(path);
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    corpus::load_jsonl(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// `id=path` pairs used by `--head-from` and `--val`.
fn parse_binding(s: &str) -> Result<(String, PathBuf)> {
    let (id, path) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected id=path, got '{s}'"))?;
    Ok((id.to_string(), PathBuf::from(path)))
}

/// Hyperparameters from flags over config-file values over defaults.
#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f32>,
    #[arg(long)]
    lr_head: Option<f32>,
    #[arg(long)]
    vul_class_weight: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

impl HyperArgs {
    fn resolve(&self, file: Option<&TrainHyper>) -> TrainHyper {
        let base = file.cloned().unwrap_or_default();
        TrainHyper {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr_encoder: self.lr_encoder.unwrap_or(base.lr_encoder),
            lr_head: self.lr_head.unwrap_or(base.lr_head),
            vul_class_weight: self.vul_class_weight.unwrap_or(base.vul_class_weight),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self, file: Option<&ModelConfig>) -> ModelConfig {
        let base = file.cloned().unwrap_or_else(|| ModelConfig::toy(512));
        ModelConfig {
            vocab_size: self.vocab_size.unwrap_or(base.vocab_size),
            d_model: self.d_model.unwrap_or(base.d_model),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            d_ff: self.d_ff.unwrap_or(base.d_ff),
            max_len: self.max_len.unwrap_or(base.max_len),
        }
    }
}

// ───────────────────────── gen-corpus ─────────────────────────

#[derive(Args)]
struct GenCorpusArgs {
    /// Output directory; one <pattern-id>.jsonl per pattern.
    #[arg(long)]
    out: PathBuf,
    /// Pattern spec `id=family:positives/negatives`, repeatable. Families:
    /// unchecked-arith, reachable-assert, unreleased-handle, privilege-call
    /// (or their CWE names). Defaults to the four-pattern reference corpus.
    #[arg(long = "pattern")]
    patterns: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of positive snippets that carry the signature idiom.
    #[arg(long)]
    signature_rate: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_pattern(s: &str) -> Result<(String, PatternSpec)> {
    let err = || anyhow!("expected id=family:positives/negatives, got '{s}'");
    let (id, rest) = s.split_once('=').ok_or_else(err)?;
    let (family, counts) = rest.split_once(':').ok_or_else(err)?;
    let (pos, neg) = counts.split_once('/').ok_or_else(err)?;
    Ok((
        id.to_string(),
        PatternSpec {
            family: PatternFamily::parse(family)?,
            positives: pos.parse().map_err(|_| err())?,
            negatives: neg.parse().map_err(|_| err())?,
        },
    ))
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(42);
    let mut ctx = RunContext::new("gen-corpus");
    if let Some(cfg) = &args.config {
        ctx.input(cfg)?;
    }
    ctx.seed("corpus", seed);

    let patterns = if args.patterns.is_empty() {
        CorpusSpec::reference_tenth(seed).patterns
    } else {
        args.patterns
            .iter()
            .map(|s| parse_pattern(s))
            .collect::<Result<_>>()?
    };
    let mut spec = CorpusSpec::new(patterns, seed);
    if let Some(rate) = args.signature_rate.or(file.signature_rate) {
        spec.signature_rate = rate;
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let sets = yoto_core::corpus::generate_corpus(&spec)?;
    for (id, ds) in &sets {
        let path = args.out.join(format!("{id}.jsonl"));
        corpus::save_jsonl(ds, &path)?;
        ctx.output(&path);
        println!("wrote {} ({} records)", path.display(), ds.len());
    }
    ctx.finish(&args.out)
}

// ───────────────────────── training commands ─────────────────────────

#[derive(Args)]
struct PretrainArgs {
    /// Dataset JSONL files forming the pretraining text mix.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let mut ctx = RunContext::new("pretrain");
    if let Some(cfg) = &args.config {
        ctx.input(cfg)?;
    }
    let config = args.model.resolve(file.model.as_ref());
    let hyper = args.hyper.resolve(file.pretrain.as_ref());
    ctx.seed("hyper", hyper.seed);

    let mut records = Vec::new();
    for path in &args.data {
        ctx.input(path)?;
        let ds = load_dataset(path)?;
        records.extend(ds.records.into_iter().map(|r| FuncRecord {
            func: r.func,
            target: 0,
            cwe: String::new(),
        }));
    }
    let mix = Dataset::new(records, vec!["none".into()], "cli pretrain mix")?;

    let outcome = train::pretrain(&mix, &config, &hyper)?;
    save_checkpoint(&outcome.checkpoint, &args.out, &mut ctx)?;
    let log_path = args.out.with_extension("log.csv");
    std::fs::write(&log_path, outcome.log.to_csv())
        .with_context(|| format!("writing {}", log_path.display()))?;
    ctx.output(&log_path);
    println!(
        "pretrained {} ({} records, {} epochs, fingerprint {})",
        args.out.display(),
        mix.len(),
        hyper.epochs,
        outcome.checkpoint.fingerprint()
    );
    ctx.finish(&args.out)
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Head id to create (also the model's name in reports).
    #[arg(long)]
    head: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let mut ctx = RunContext::new("finetune");
    if let Some(cfg) = &args.config {
        ctx.input(cfg)?;
    }
    ctx.input(&args.base)?;
    ctx.input(&args.data)?;
    let hyper = args.hyper.resolve(file.finetune.as_ref());
    ctx.seed("hyper", hyper.seed);

    let base = load_checkpoint(&args.base)?;
    let dataset = load_dataset(&args.data)?;
    let (ckpt, log) = train::finetune(&base, &dataset, &args.head, &hyper)?;
    save_checkpoint(&ckpt, &args.out, &mut ctx)?;
    let log_path = args.out.with_extension("log.csv");
    std::fs::write(&log_path, log.to_csv())?;
    ctx.output(&log_path);
    let last = log.rows.last().map(|r| r.train_acc).unwrap_or(0.0);
    println!(
        "finetuned head '{}' on {} (final train accuracy {:.4})",
        args.head,
        args.data.display(),
        last
    );
    ctx.finish(&args.out)
}

#[derive(Args)]
struct JointTrainArgs {
    #[arg(long)]
    base: PathBuf,
    /// Dataset files, concatenated with classes renumbered in order.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "joint")]
    head: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_joint_train(args: JointTrainArgs) -> Result<()> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let mut ctx = RunContext::new("joint-train");
    if let Some(cfg) = &args.config {
        ctx.input(cfg)?;
    }
    ctx.input(&args.base)?;
    let hyper = args.hyper.resolve(file.finetune.as_ref());
    ctx.seed("hyper", hyper.seed);

    let base = load_checkpoint(&args.base)?;
    let mut datasets = Vec::new();
    for path in &args.data {
        ctx.input(path)?;
        datasets.push(load_dataset(path)?);
    }
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let (ckpt, log) = train::joint_train(&base, &refs, &args.head, &hyper)?;
    save_checkpoint(&ckpt, &args.out, &mut ctx)?;
    let log_path = args.out.with_extension("log.csv");
    std::fs::write(&log_path, log.to_csv())?;
    ctx.output(&log_path);
    println!(
        "joint-trained head '{}' over {} datasets",
        args.head,
        datasets.len()
    );
    ctx.finish(&args.out)
}

// ───────────────────────── vec commands ─────────────────────────

#[derive(Args)]
struct VecDiffArgs {
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// Ablation: zero the embedding-table deltas, merging blocks only.
    #[arg(long)]
    skip_embeddings: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_vec_diff(args: VecDiffArgs) -> Result<()> {
    let mut ctx = RunContext::new("vec diff");
    ctx.input(&args.finetuned)?;
    ctx.input(&args.base)?;
    let ft = load_checkpoint(&args.finetuned)?;
    let base = load_checkpoint(&args.base)?;
    let mut v = vulvec::compute_vulvector(&ft, &base)?;
    if args.skip_embeddings {
        v = v.without_embeddings();
    }
    save_checkpoint(&v.to_checkpoint()?, &args.out, &mut ctx)?;
    println!("wrote vul-vector {}", args.out.display());
    ctx.finish(&args.out)
}

fn load_vector(path: &Path) -> Result<VulVector> {
    VulVector::from_checkpoint(&load_checkpoint(path)?)
        .with_context(|| format!("{} is not a vulvector checkpoint", path.display()))
}

#[derive(Args)]
struct VecAddArgs {
    /// Vector files, repeatable (two or more).
    #[arg(long = "vec", required = true, num_args = 1..)]
    vectors: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_vec_add(args: VecAddArgs) -> Result<()> {
    let mut ctx = RunContext::new("vec add");
    let mut vectors = Vec::new();
    for p in &args.vectors {
        ctx.input(p)?;
        vectors.push(load_vector(p)?);
    }
    let refs: Vec<&VulVector> = vectors.iter().collect();
    let sum = vulvec::vv_sum(&refs)?;
    save_checkpoint(&sum.to_checkpoint()?, &args.out, &mut ctx)?;
    println!("summed {} vectors into {}", vectors.len(), args.out.display());
    ctx.finish(&args.out)
}

#[derive(Args)]
struct VecScaleArgs {
    #[arg(long)]
    vec: PathBuf,
    #[arg(long)]
    lambda: f32,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_vec_scale(args: VecScaleArgs) -> Result<()> {
    let mut ctx = RunContext::new("vec scale");
    ctx.input(&args.vec)?;
    let v = load_vector(&args.vec)?;
    let scaled = vulvec::vv_scale(&v, args.lambda);
    save_checkpoint(&scaled.to_checkpoint()?, &args.out, &mut ctx)?;
    println!("scaled by {} into {}", args.lambda, args.out.display());
    ctx.finish(&args.out)
}

#[derive(Args)]
struct VecApplyArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long = "vec", required = true, num_args = 1..)]
    vectors: Vec<PathBuf>,
    /// Scale applied once to the summed vector.
    #[arg(long, default_value_t = 1.0)]
    lambda: f32,
    /// Heads to attach, `head_id=checkpoint.yoto`, repeatable.
    #[arg(long = "head-from")]
    heads_from: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_vec_apply(args: VecApplyArgs) -> Result<()> {
    let mut ctx = RunContext::new("vec apply");
    ctx.input(&args.base)?;
    let base = load_checkpoint(&args.base)?;
    let mut vectors = Vec::new();
    for p in &args.vectors {
        ctx.input(p)?;
        vectors.push(load_vector(p)?);
    }
    let refs: Vec<&VulVector> = vectors.iter().collect();
    let mut bank = HeadBank::new();
    for spec in &args.heads_from {
        let (id, path) = parse_binding(spec)?;
        ctx.input(&path)?;
        bank.add_from(&load_checkpoint(&path)?, &id)?;
    }
    let merged = vulvec::merge(&base, &refs, args.lambda, &bank)?;
    save_checkpoint(&merged, &args.out, &mut ctx)?;
    println!(
        "merged (λ={}) into {} (fingerprint {})",
        args.lambda,
        args.out.display(),
        merged.fingerprint()
    );
    ctx.finish(&args.out)
}

#[derive(Args)]
struct VecMeanArgs {
    /// Checkpoints to average, repeatable (two or more).
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_vec_mean(args: VecMeanArgs) -> Result<()> {
    let mut ctx = RunContext::new("vec mean");
    let mut checkpoints = Vec::new();
    for p in &args.models {
        ctx.input(p)?;
        checkpoints.push(load_checkpoint(p)?);
    }
    let refs: Vec<&Checkpoint> = checkpoints.iter().collect();
    let mean = vulvec::param_mean(&refs)?;
    save_checkpoint(&mean, &args.out, &mut ctx)?;
    println!("parameter mean of {} models in {}", refs.len(), args.out.display());
    ctx.finish(&args.out)
}

// ───────────────────────── eval / select-lambda ─────────────────────────

fn parse_scheme(s: &str) -> Result<MetricScheme> {
    match s {
        "binary" => Ok(MetricScheme::BinaryPositive),
        "macro" => Ok(MetricScheme::MacroVul),
        other => bail!("unknown scheme '{other}' (binary|macro)"),
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    head: String,
    #[arg(long)]
    data: PathBuf,
    /// binary | macro; default follows the dataset's class count.
    #[arg(long)]
    scheme: Option<String>,
    /// Optional report CSV path.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut ctx = RunContext::new("eval");
    ctx.input(&args.ckpt)?;
    ctx.input(&args.data)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    let scheme = match &args.scheme {
        Some(s) => parse_scheme(s)?,
        None => MetricScheme::for_dataset(&ds),
    };
    let metrics = cross_eval(&ckpt, &args.head, &ds, scheme)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "accuracy {:.4}  recall {}  precision {}",
        metrics.accuracy,
        fmt(metrics.recall),
        fmt(metrics.precision)
    );
    if let Some(report_path) = &args.report {
        let report = Report {
            rows: vec![ReportRow {
                model: args.head.clone(),
                dataset: args
                    .data
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                split: corpus::split_role(&ds.provenance).unwrap_or("-").to_string(),
                metrics,
                lambda: ckpt.meta.lambda,
                fingerprint: ckpt.fingerprint().0,
            }],
            provenance: format!("eval {} on {}", args.ckpt.display(), args.data.display()),
        };
        emit_report(&report, report_path)?;
        ctx.output(report_path);
        ctx.finish(report_path)?;
    }
    Ok(())
}

#[derive(Args)]
struct SelectLambdaArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long = "vec", required = true, num_args = 1..)]
    vectors: Vec<PathBuf>,
    /// Heads to attach, `head_id=checkpoint.yoto`, repeatable.
    #[arg(long = "head-from", required = true)]
    heads_from: Vec<String>,
    /// Validation datasets, `head_id=dataset.jsonl`, repeatable. Test
    /// splits are rejected.
    #[arg(long = "val", required = true)]
    vals: Vec<String>,
    /// Comma-separated λ grid; defaults to 0.1..1.0 step 0.1.
    #[arg(long)]
    grid: Option<String>,
    /// Per-λ validation report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn cmd_select_lambda(args: SelectLambdaArgs) -> Result<()> {
    let mut ctx = RunContext::new("select-lambda");
    ctx.input(&args.base)?;
    let base = load_checkpoint(&args.base)?;
    let mut vectors = Vec::new();
    for p in &args.vectors {
        ctx.input(p)?;
        vectors.push(load_vector(p)?);
    }
    let refs: Vec<&VulVector> = vectors.iter().collect();
    let mut bank = HeadBank::new();
    for spec in &args.heads_from {
        let (id, path) = parse_binding(spec)?;
        ctx.input(&path)?;
        bank.add_from(&load_checkpoint(&path)?, &id)?;
    }
    let mut val_sets = Vec::new();
    for spec in &args.vals {
        let (id, path) = parse_binding(spec)?;
        ctx.input(&path)?;
        val_sets.push((id, load_dataset(&path)?));
    }
    let targets: Vec<EvalTarget<'_>> = val_sets
        .iter()
        .map(|(id, ds)| EvalTarget {
            label: id.clone(),
            head_id: id.clone(),
            dataset: ds,
            scheme: MetricScheme::for_dataset(ds),
        })
        .collect();
    let grid = match &args.grid {
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse::<f32>().map_err(|e| anyhow!("bad grid value '{x}': {e}")))
            .collect::<Result<Vec<f32>>>()?,
        None => eval::default_lambda_grid(),
    };
    let (best, report) = select_lambda(&base, &refs, &bank, &targets, &grid)?;
    println!("lambda={best}");
    if let Some(path) = &args.report {
        emit_report(&report, path)?;
        ctx.output(path);
        ctx.finish(path)?;
    }
    Ok(())
}

// ───────────────────────── scenario ─────────────────────────

#[derive(Args)]
struct ScenarioArgs {
    /// single | multi | incremental
    kind: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_scenario(args: ScenarioArgs) -> Result<()> {
    let kind = match args.kind.as_str() {
        "single" => ScenarioKind::SingleMerge,
        "multi" => ScenarioKind::MultiMerge,
        "incremental" => ScenarioKind::Incremental,
        other => bail!("unknown scenario '{other}' (single|multi|incremental)"),
    };
    let file = RunConfig::load(&args.config)?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| file.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| anyhow!("no output directory (flag --out-dir or config out_dir)"))?;
    let seed = args.seed.or(file.seed).unwrap_or(42);

    let mut ctx = RunContext::new(&format!("scenario {}", args.kind));
    ctx.input(&args.config)?;
    ctx.seed("scenario", seed);

    let spec = ScenarioSpec {
        kind,
        tasks: file.task_specs()?,
        config: file
            .model
            .clone()
            .ok_or_else(|| anyhow!("run config needs a [model] table"))?,
        pretrain_hyper: file.pretrain.clone().unwrap_or_default(),
        finetune_hyper: file.finetune.clone().unwrap_or_default(),
        lambda: file.lambda_choice()?,
        ratios: file.ratios(),
        seed,
        include_joint: file
            .include_joint
            .unwrap_or(kind == ScenarioKind::MultiMerge),
    };

    std::fs::create_dir_all(&out_dir)?;
    let outcome = eval::run_scenario(&spec);
    let report_path = out_dir.join("report.csv");
    emit_report(&outcome.report, &report_path)?;
    ctx.output(&report_path);
    for (stage, log) in &outcome.train_logs {
        let log_path = out_dir.join(format!("train-{stage}.csv"));
        std::fs::write(&log_path, log.to_csv())?;
        ctx.output(&log_path);
    }
    ctx.finish(&out_dir)?;
    match outcome.error {
        None => {
            println!("report: {}", report_path.display());
            Ok(())
        }
        Some(e) => bail!("scenario failed (partial report flushed to {}): {e}", report_path.display()),
    }
}

// ───────────────────────── entry ─────────────────────────

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::JointTrain(a) => cmd_joint_train(a),
        Command::Vec(v) => match v {
            VecCommand::Diff(a) => cmd_vec_diff(a),
            VecCommand::Add(a) => cmd_vec_add(a),
            VecCommand::Scale(a) => cmd_vec_scale(a),
            VecCommand::Apply(a) => cmd_vec_apply(a),
            VecCommand::Mean(a) => cmd_vec_mean(a),
        },
        Command::Eval(a) => cmd_eval(a),
        Command::SelectLambda(a) => cmd_select_lambda(a),
        Command::Scenario(a) => cmd_scenario(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
