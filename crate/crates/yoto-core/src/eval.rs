//! Metrics, cross-evaluation, λ selection on validation data, and the three
//! scripted experiment protocols (single-vuln merge, multi-vuln merge,
//! incremental fusion).
//!
//! Cross-dataset label mapping: a model head with the same number of
//! classes as the dataset is compared positionally (this covers binary
//! specialists on foreign binary datasets and equal-arity multi-class
//! cross-evaluation); otherwise predictions map to dataset classes by CWE
//! name and anything unmappable scores as incorrect. Undefined metric
//! ratios (zero denominators) are reported as absent, never silently as 0.

use std::collections::BTreeMap;

use crate::corpus::{generate_corpus, split, split_role, CorpusSpec, Dataset, FuncRecord, PatternSpec};
use crate::error::{Result, YotoError};
use crate::model::{self, Batch, ModelConfig};
use crate::rng::derive_seed;
use crate::store::Checkpoint;
use crate::train::{finetune, joint_train, pretrain, tokenize_dataset, TrainHyper, TrainLog};
use crate::vulvec::{apply, compute_vulvector, merge, vv_add, vv_scale, HeadBank, VulVector};

/// Sentinel for a prediction outside the dataset's label space; always
/// scores as incorrect.
pub const UNMAPPED: usize = usize::MAX;

/// Precision/recall averaging scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricScheme {
    /// Two classes; recall/precision of class 1.
    BinaryPositive,
    /// Unweighted mean of per-class recall/precision over vulnerability
    /// classes (ids >= 1).
    MacroVul,
}

impl MetricScheme {
    /// The natural scheme for a dataset: binary for 2 classes, macro above.
    pub fn for_dataset(ds: &Dataset) -> MetricScheme {
        if ds.class_names.len() == 2 {
            MetricScheme::BinaryPositive
        } else {
            MetricScheme::MacroVul
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPr {
    pub class_id: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub support: usize,
}

/// Accuracy / recall / precision record matching the report columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub per_class: Option<Vec<ClassPr>>,
    pub support: Vec<usize>,
}

/// Exact-match accuracy plus scheme-dependent recall/precision.
pub fn compute_metrics(
    preds: &[usize],
    targets: &[usize],
    scheme: MetricScheme,
) -> Result<Metrics> {
    if preds.len() != targets.len() {
        return Err(YotoError::InvalidArgument(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(YotoError::InvalidArgument("empty evaluation".into()));
    }
    let n_classes = targets.iter().max().unwrap() + 1;
    let n_classes = n_classes.max(2);
    if scheme == MetricScheme::BinaryPositive && n_classes != 2 {
        return Err(YotoError::Config(format!(
            "binary-positive scheme on {n_classes}-class targets"
        )));
    }

    let total = targets.len() as f64;
    let correct = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| *p == *t)
        .count() as f64;
    let accuracy = correct / total;

    let mut support = vec![0usize; n_classes];
    for &t in targets {
        support[t] += 1;
    }

    let class_pr = |class: usize| -> ClassPr {
        let tp = preds
            .iter()
            .zip(targets)
            .filter(|(p, t)| **p == class && **t == class)
            .count();
        let predicted = preds.iter().filter(|&&p| p == class).count();
        ClassPr {
            class_id: class,
            recall: (support[class] > 0).then(|| tp as f64 / support[class] as f64),
            precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
            support: support[class],
        }
    };

    match scheme {
        MetricScheme::BinaryPositive => {
            let pr = class_pr(1);
            Ok(Metrics {
                accuracy,
                recall: pr.recall,
                precision: pr.precision,
                per_class: None,
                support,
            })
        }
        MetricScheme::MacroVul => {
            let per_class: Vec<ClassPr> = (1..n_classes).map(class_pr).collect();
            let mean_of = |vals: Vec<f64>| {
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let recall = mean_of(per_class.iter().filter_map(|c| c.recall).collect());
            let precision = mean_of(per_class.iter().filter_map(|c| c.precision).collect());
            Ok(Metrics {
                accuracy,
                recall,
                precision,
                per_class: Some(per_class),
                support,
            })
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Raw model predictions over a dataset, in the model head's own class ids.
pub fn predict_dataset(ckpt: &Checkpoint, head_id: &str, ds: &Dataset) -> Result<Vec<usize>> {
    let vocab = ckpt
        .meta
        .vocab
        .as_ref()
        .ok_or_else(|| YotoError::Config("checkpoint carries no vocabulary".into()))?;
    let seqs = tokenize_dataset(vocab, &ckpt.config, ds)?;
    let mut preds = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = Batch::from_sequences(chunk)?;
        preds.extend(model::predict(&ckpt.params, &ckpt.config, &batch, head_id)?);
    }
    Ok(preds)
}

/// Maps model-space predictions into the dataset's label space (see module
/// docs for the positional/name-based rule).
fn map_predictions(
    model_classes: &[String],
    dataset_classes: &[String],
    preds: Vec<usize>,
) -> Vec<usize> {
    if model_classes.len() == dataset_classes.len() {
        return preds;
    }
    let lookup: BTreeMap<&str, usize> = dataset_classes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let table: Vec<usize> = model_classes
        .iter()
        .map(|name| lookup.get(name.as_str()).copied().unwrap_or(UNMAPPED))
        .collect();
    preds
        .into_iter()
        .map(|p| table.get(p).copied().unwrap_or(UNMAPPED))
        .collect()
}

/// Evaluates one checkpoint head on one dataset (whatever split the caller
/// hands in; experiment protocols pass test splits for reporting and val
/// splits for λ selection).
pub fn cross_eval(
    ckpt: &Checkpoint,
    head_id: &str,
    ds: &Dataset,
    scheme: MetricScheme,
) -> Result<Metrics> {
    ds.validate()?;
    if scheme == MetricScheme::BinaryPositive && ds.class_names.len() != 2 {
        return Err(YotoError::Config(
            "binary-positive scheme needs a two-class dataset".into(),
        ));
    }
    let model_classes = ckpt
        .meta
        .head_classes
        .get(head_id)
        .ok_or_else(|| YotoError::MissingHead(head_id.to_string()))?
        .clone();
    let raw = predict_dataset(ckpt, head_id, ds)?;
    let preds = map_predictions(&model_classes, &ds.class_names, raw);
    compute_metrics(&preds, &ds.targets(), scheme)
}

// ───────────────────────── reports ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub split: String,
    pub metrics: Metrics,
    pub lambda: Option<f32>,
    pub fingerprint: String,
}

/// Table of (model, dataset, metrics) rows plus run provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub provenance: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".into(),
    }
}

impl Report {
    /// CSV with header `model,dataset,split,accuracy,recall,precision,lambda,fingerprint`;
    /// absent values render as `-`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,dataset,split,accuracy,recall,precision,lambda,fingerprint\n");
        for r in &self.rows {
            debug_assert!(!r.model.contains(',') && !r.dataset.contains(','));
            out.push_str(&format!(
                "{},{},{},{:.6},{},{},{},{}\n",
                r.model,
                r.dataset,
                r.split,
                r.metrics.accuracy,
                fmt_opt(r.metrics.recall),
                fmt_opt(r.metrics.precision),
                r.lambda.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
                r.fingerprint,
            ));
        }
        out
    }

    pub fn rows_for(&self, model: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.model == model).collect()
    }

    /// Unweighted mean accuracy over the rows of one model name.
    pub fn mean_accuracy(&self, model: &str) -> Option<f64> {
        let rows = self.rows_for(model);
        (!rows.is_empty()).then(|| {
            rows.iter().map(|r| r.metrics.accuracy).sum::<f64>() / rows.len() as f64
        })
    }
}

/// Writes the report CSV to disk.
pub fn emit_report(report: &Report, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| YotoError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    std::fs::write(path, report.to_csv()).map_err(|e| YotoError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parses a report CSV back into rows (numeric cells and the `-` absent
/// convention; per-class detail does not survive the roundtrip).
pub fn parse_report_csv(text: &str) -> Result<Report> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| YotoError::Parse {
        line: 1,
        msg: "empty report".into(),
    })?;
    if header != "model,dataset,split,accuracy,recall,precision,lambda,fingerprint" {
        return Err(YotoError::Parse {
            line: 1,
            msg: format!("unexpected header '{header}'"),
        });
    }
    let parse_opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s == "-" {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| YotoError::Parse {
                    line,
                    msg: format!("bad number '{s}': {e}"),
                })
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(YotoError::Parse {
                line: i + 1,
                msg: format!("expected 8 cells, got {}", parts.len()),
            });
        }
        rows.push(ReportRow {
            model: parts[0].to_string(),
            dataset: parts[1].to_string(),
            split: parts[2].to_string(),
            metrics: Metrics {
                accuracy: parse_opt(parts[3], i + 1)?.ok_or_else(|| YotoError::Parse {
                    line: i + 1,
                    msg: "accuracy may not be absent".into(),
                })?,
                recall: parse_opt(parts[4], i + 1)?,
                precision: parse_opt(parts[5], i + 1)?,
                per_class: None,
                support: Vec::new(),
            },
            lambda: match parts[6] {
                "-" => None,
                s => Some(s.parse::<f32>().map_err(|e| YotoError::Parse {
                    line: i + 1,
                    msg: format!("bad lambda '{s}': {e}"),
                })?),
            },
            fingerprint: parts[7].to_string(),
        });
    }
    Ok(Report {
        rows,
        provenance: String::new(),
    })
}

// ───────────────────────── λ selection ─────────────────────────

/// One evaluation cell: which head scores which dataset under which scheme.
#[derive(Debug, Clone)]
pub struct EvalTarget<'a> {
    pub label: String,
    pub head_id: String,
    pub dataset: &'a Dataset,
    pub scheme: MetricScheme,
}

fn forbid_test_split(ds: &Dataset, what: &str) -> Result<()> {
    if split_role(&ds.provenance) == Some("test") {
        return Err(YotoError::Invariant(format!(
            "{what} must never touch a test split (provenance: {})",
            ds.provenance
        )));
    }
    Ok(())
}

/// Sweeps the λ grid, scoring each candidate merge by unweighted mean
/// accuracy over the validation targets. Ties break toward the smaller λ.
/// Handing in a test-tagged dataset is an error.
pub fn select_lambda(
    base: &Checkpoint,
    vectors: &[&VulVector],
    heads: &HeadBank,
    valsets: &[EvalTarget<'_>],
    grid: &[f32],
) -> Result<(f32, Report)> {
    if grid.is_empty() {
        return Err(YotoError::InvalidArgument("empty λ grid".into()));
    }
    if valsets.is_empty() {
        return Err(YotoError::InvalidArgument("no validation targets".into()));
    }
    for t in valsets {
        forbid_test_split(t.dataset, "λ selection")?;
    }

    let mut report = Report {
        rows: Vec::new(),
        provenance: "lambda selection".into(),
    };
    let mut best: Option<(f32, f64)> = None;
    for &lambda in grid {
        let candidate = merge(base, vectors, lambda, heads)?;
        let fp = candidate.fingerprint().0;
        let mut acc_sum = 0.0;
        for t in valsets {
            let m = cross_eval(&candidate, &t.head_id, t.dataset, t.scheme)?;
            acc_sum += m.accuracy;
            report.rows.push(ReportRow {
                model: "yoto".into(),
                dataset: t.label.clone(),
                split: "val".into(),
                metrics: m,
                lambda: Some(lambda),
                fingerprint: fp.clone(),
            });
        }
        let score = acc_sum / valsets.len() as f64;
        let better = match best {
            None => true,
            Some((bl, bs)) => score > bs || (score == bs && lambda < bl),
        };
        if better {
            best = Some((lambda, score));
        }
    }
    Ok((best.unwrap().0, report))
}

/// The default λ grid, 0.1 through 1.0 in steps of 0.1.
pub fn default_lambda_grid() -> Vec<f32> {
    (1..=10).map(|i| i as f32 / 10.0).collect()
}

// ───────────────────────── scenario protocols ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// K binary specialists, cross-eval matrix, param-mean, YOTO merge.
    SingleMerge,
    /// Two multi-class specialists, cross-eval, param-mean, YOTO, joint.
    MultiMerge,
    /// Fold single-vuln vectors into a multi-class model one at a time.
    Incremental,
}

/// One task: a name (also its head id) plus the pattern families it is
/// built from. One family makes a binary dataset, k families a (k+1)-class
/// dataset.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub families: Vec<PatternSpec>,
}

/// Fixed λ or a validation-selected grid.
#[derive(Debug, Clone)]
pub enum LambdaChoice {
    Fixed(f32),
    Grid(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub tasks: Vec<TaskSpec>,
    pub config: ModelConfig,
    pub pretrain_hyper: TrainHyper,
    pub finetune_hyper: TrainHyper,
    pub lambda: LambdaChoice,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// Train the joint comparator (multi-merge protocol).
    pub include_joint: bool,
}

/// A report that survives partial failure: rows gathered so far plus a
/// failure marker when the run aborted. Training logs of every stage are
/// kept so callers can audit convergence.
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub report: Report,
    pub train_logs: Vec<(String, TrainLog)>,
    pub error: Option<String>,
}

struct TaskData {
    name: String,
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

impl TaskData {
    fn scheme(&self) -> MetricScheme {
        MetricScheme::for_dataset(&self.test)
    }
}

fn build_task_datasets(spec: &ScenarioSpec) -> Result<Vec<TaskData>> {
    let mut out = Vec::with_capacity(spec.tasks.len());
    for (i, task) in spec.tasks.iter().enumerate() {
        model::validate_head_id(&task.name)?;
        let patterns: Vec<(String, PatternSpec)> = task
            .families
            .iter()
            .map(|f| (format!("{}-{}", task.name, f.family.cwe()), f.clone()))
            .collect();
        let gen = generate_corpus(&CorpusSpec::new(patterns, derive_seed(spec.seed, 10 + i as u64)))?;
        // preserve the declared family order, not the map's key order
        let parts: Vec<Dataset> = task
            .families
            .iter()
            .map(|f| gen[&format!("{}-{}", task.name, f.family.cwe())].clone())
            .collect();
        let dataset = if parts.len() == 1 {
            parts.into_iter().next().unwrap().with_provenance(format!("task:{}", task.name))
        } else {
            let refs: Vec<&Dataset> = parts.iter().collect();
            crate::corpus::concat_datasets(&refs)?
                .with_provenance(format!("task:{}", task.name))
        };
        let sets = split(&dataset, spec.ratios, derive_seed(spec.seed, 500 + i as u64))?;
        out.push(TaskData {
            name: task.name.clone(),
            train: sets.train,
            val: sets.val,
            test: sets.test,
        });
    }
    Ok(out)
}

/// Flat unlabeled text mix of the train splits, for masked-token
/// pretraining.
fn pretrain_mix(tasks: &[TaskData]) -> Result<Dataset> {
    let records: Vec<FuncRecord> = tasks
        .iter()
        .flat_map(|t| t.train.records.iter())
        .map(|r| FuncRecord {
            func: r.func.clone(),
            target: 0,
            cwe: String::new(),
        })
        .collect();
    Dataset::new(records, vec!["none".into()], "pretrain-mix")
}

fn eval_row(
    ckpt: &Checkpoint,
    model_label: &str,
    head_id: &str,
    ds: &Dataset,
    ds_label: &str,
    scheme: MetricScheme,
    lambda: Option<f32>,
) -> Result<ReportRow> {
    let metrics = cross_eval(ckpt, head_id, ds, scheme)?;
    Ok(ReportRow {
        model: model_label.to_string(),
        dataset: ds_label.to_string(),
        split: split_role(&ds.provenance).unwrap_or("-").to_string(),
        metrics,
        lambda,
        fingerprint: ckpt.fingerprint().0,
    })
}

fn run_scenario_inner(
    spec: &ScenarioSpec,
    report: &mut Report,
    train_logs: &mut Vec<(String, TrainLog)>,
) -> Result<()> {
    spec.config.validate()?;
    if spec.tasks.is_empty() {
        return Err(YotoError::InvalidArgument("scenario without tasks".into()));
    }
    let tasks = build_task_datasets(spec)?;

    let mix = pretrain_mix(&tasks)?;
    let pre_hyper = spec.pretrain_hyper.clone().with_seed(derive_seed(spec.seed, 1));
    let pre = pretrain(&mix, &spec.config, &pre_hyper)?;
    train_logs.push(("pretrain".to_string(), pre.log));
    let base = pre.checkpoint;

    let mut specialists = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let hyper = spec
            .finetune_hyper
            .clone()
            .with_seed(derive_seed(spec.seed, 100 + i as u64));
        let (ckpt, log) = finetune(&base, &task.train, &task.name, &hyper)?;
        train_logs.push((format!("finetune-{}", task.name), log));
        specialists.push(ckpt);
    }

    let vectors: Vec<VulVector> = specialists
        .iter()
        .map(|s| compute_vulvector(s, &base))
        .collect::<Result<_>>()?;
    let vector_refs: Vec<&VulVector> = vectors.iter().collect();

    let mut bank = HeadBank::new();
    for (task, ckpt) in tasks.iter().zip(&specialists) {
        bank.add_from(ckpt, &task.name)?;
    }

    // specialist self rows
    for (task, ckpt) in tasks.iter().zip(&specialists) {
        report.rows.push(eval_row(
            ckpt, &task.name, &task.name, &task.test, &task.name, task.scheme(), None,
        )?);
    }

    match spec.kind {
        ScenarioKind::SingleMerge | ScenarioKind::MultiMerge => {
            // cross-evaluation matrix (off-diagonal)
            for (i, ckpt) in specialists.iter().enumerate() {
                for (j, other) in tasks.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    report.rows.push(eval_row(
                        ckpt,
                        &format!("cross-{}", tasks[i].name),
                        &tasks[i].name,
                        &other.test,
                        &other.name,
                        other.scheme(),
                        None,
                    )?);
                }
            }

            // param-mean baseline
            let refs: Vec<&Checkpoint> = specialists.iter().collect();
            let pm = crate::vulvec::param_mean(&refs)?;
            for task in &tasks {
                report.rows.push(eval_row(
                    &pm, "param-mean", &task.name, &task.test, &task.name, task.scheme(), None,
                )?);
            }

            // YOTO merge at the chosen λ
            let lambda = match &spec.lambda {
                LambdaChoice::Fixed(l) => *l,
                LambdaChoice::Grid(grid) => {
                    let valsets: Vec<EvalTarget<'_>> = tasks
                        .iter()
                        .map(|t| EvalTarget {
                            label: t.name.clone(),
                            head_id: t.name.clone(),
                            dataset: &t.val,
                            scheme: t.scheme(),
                        })
                        .collect();
                    select_lambda(&base, &vector_refs, &bank, &valsets, grid)?.0
                }
            };
            let merged = merge(&base, &vector_refs, lambda, &bank)?;
            for task in &tasks {
                report.rows.push(eval_row(
                    &merged,
                    "yoto",
                    &task.name,
                    &task.test,
                    &task.name,
                    task.scheme(),
                    Some(lambda),
                )?);
            }

            // joint-training comparator
            if spec.include_joint {
                let train_parts: Vec<&Dataset> = tasks.iter().map(|t| &t.train).collect();
                let hyper = spec
                    .finetune_hyper
                    .clone()
                    .with_seed(derive_seed(spec.seed, 900));
                let (joint, log) = joint_train(&base, &train_parts, "joint", &hyper)?;
                train_logs.push(("joint".to_string(), log));
                for task in &tasks {
                    report.rows.push(eval_row(
                        &joint, "joint", "joint", &task.test, &task.name, task.scheme(), None,
                    )?);
                }
            }
        }
        ScenarioKind::Incremental => {
            // tasks[0] is the starting multi-class model; the rest fold in
            // one at a time through the running-sum path, so sequential and
            // batch merging coincide by construction.
            let grid = match &spec.lambda {
                LambdaChoice::Fixed(l) => vec![*l],
                LambdaChoice::Grid(g) => g.clone(),
            };
            let mut running = vectors[0].clone();
            let mut stage_label = tasks[0].name.clone();
            let mut stage_bank = HeadBank::new();
            stage_bank.add_from(&specialists[0], &tasks[0].name)?;

            for k in 1..tasks.len() {
                stage_bank.add_from(&specialists[k], &tasks[k].name)?;
                // pick λ for this fold on the validation splits seen so far
                let mut best: Option<(f32, f64, VulVector)> = None;
                for &lambda in &grid {
                    let candidate = vv_add(&running, &vv_scale(&vectors[k], lambda))?;
                    let stage = apply(&base, &candidate, &stage_bank)?;
                    let mut acc = 0.0;
                    for t in tasks[..=k].iter() {
                        forbid_test_split(&t.val, "incremental λ selection")?;
                        acc += cross_eval(&stage, &t.name, &t.val, t.scheme())?.accuracy;
                    }
                    let score = acc / (k + 1) as f64;
                    let better = match &best {
                        None => true,
                        Some((bl, bs, _)) => score > *bs || (score == *bs && lambda < *bl),
                    };
                    if better {
                        best = Some((lambda, score, candidate));
                    }
                }
                let (lambda, _, chosen) = best.expect("grid is nonempty");
                running = chosen;
                stage_label = format!("{stage_label}+{}", tasks[k].name);
                let stage = {
                    let mut s = apply(&base, &running, &stage_bank)?;
                    s.meta.lambda = Some(lambda);
                    s
                };
                for t in tasks[..=k].iter() {
                    report.rows.push(eval_row(
                        &stage,
                        &stage_label,
                        &t.name,
                        &t.test,
                        &t.name,
                        t.scheme(),
                        Some(lambda),
                    )?);
                }
            }
        }
    }
    Ok(())
}

/// Runs one scripted protocol. On failure the report keeps every row
/// produced so far plus a `FAILED` marker row carrying the error text.
pub fn run_scenario(spec: &ScenarioSpec) -> ScenarioOutcome {
    let mut report = Report {
        rows: Vec::new(),
        provenance: format!("scenario kind={:?} seed={}", spec.kind, spec.seed),
    };
    let mut train_logs = Vec::new();
    match run_scenario_inner(spec, &mut report, &mut train_logs) {
        Ok(()) => ScenarioOutcome {
            report,
            train_logs,
            error: None,
        },
        Err(e) => {
            let msg = e.to_string().replace(',', ";");
            report.rows.push(ReportRow {
                model: "FAILED".into(),
                dataset: msg.clone(),
                split: "-".into(),
                metrics: Metrics {
                    accuracy: 0.0,
                    recall: None,
                    precision: None,
                    per_class: None,
                    support: Vec::new(),
                },
                lambda: None,
                fingerprint: "-".into(),
            });
            ScenarioOutcome {
                report,
                train_logs,
                error: Some(msg),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PatternFamily;

    #[test]
    fn metrics_definitional_arithmetic() {
        // TP=3, FP=1, FN=2, TN=4 over 10 rows
        let targets = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let preds = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0];
        let m = compute_metrics(&preds, &targets, MetricScheme::BinaryPositive).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.recall.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn metrics_all_negative_predictions() {
        let targets = [0, 0, 1, 1];
        let preds = [0, 0, 0, 0];
        let m = compute_metrics(&preds, &targets, MetricScheme::BinaryPositive).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert!((m.accuracy - 0.5).abs() < 1e-12);
    }

    /// Independent confusion-matrix oracle for the 3-class macro case.
    #[test]
    fn metrics_match_confusion_matrix_oracle() {
        let targets = [0, 1, 2, 2, 1, 0, 2, 1, 0, 2];
        let preds = [0, 1, 1, 2, 0, 0, 2, 1, 2, 2];

        let mut cm = [[0usize; 3]; 3];
        for (&p, &t) in preds.iter().zip(&targets) {
            cm[t][p] += 1;
        }
        let acc = (cm[0][0] + cm[1][1] + cm[2][2]) as f64 / targets.len() as f64;
        let recall_c = |c: usize| cm[c][c] as f64 / cm[c].iter().sum::<usize>() as f64;
        let prec_c = |c: usize| {
            let pred: usize = (0..3).map(|t| cm[t][c]).sum();
            cm[c][c] as f64 / pred as f64
        };
        let want_recall = (recall_c(1) + recall_c(2)) / 2.0;
        let want_prec = (prec_c(1) + prec_c(2)) / 2.0;

        let m = compute_metrics(&preds, &targets, MetricScheme::MacroVul).unwrap();
        assert!((m.accuracy - acc).abs() < 1e-12);
        assert!((m.recall.unwrap() - want_recall).abs() < 1e-12);
        assert!((m.precision.unwrap() - want_prec).abs() < 1e-12);
        assert_eq!(m.per_class.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn metrics_sentinel_scores_incorrect() {
        let targets = [0, 1];
        let preds = [UNMAPPED, 1];
        let m = compute_metrics(&preds, &targets, MetricScheme::BinaryPositive).unwrap();
        assert!((m.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_length_mismatch() {
        assert!(compute_metrics(&[0], &[0, 1], MetricScheme::BinaryPositive).is_err());
    }

    #[test]
    fn report_csv_roundtrip_and_dashes() {
        let report = Report {
            rows: vec![
                ReportRow {
                    model: "yoto".into(),
                    dataset: "p190".into(),
                    split: "test".into(),
                    metrics: Metrics {
                        accuracy: 0.8125,
                        recall: Some(0.5),
                        precision: None,
                        per_class: None,
                        support: vec![],
                    },
                    lambda: Some(0.3),
                    fingerprint: "abc123".into(),
                },
                ReportRow {
                    model: "cross-p190".into(),
                    dataset: "p617".into(),
                    split: "test".into(),
                    metrics: Metrics {
                        accuracy: 0.75,
                        recall: Some(0.0),
                        precision: None,
                        per_class: None,
                        support: vec![],
                    },
                    lambda: None,
                    fingerprint: "def456".into(),
                },
            ],
            provenance: "test".into(),
        };
        let csv = report.to_csv();
        assert!(csv.contains("yoto,p190,test,0.812500,0.500000,-,0.3,abc123"));
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[0].metrics.precision, None);
        assert_eq!(parsed.rows[0].lambda, Some(0.3));
        // numeric cells survive the roundtrip verbatim
        assert_eq!(parse_report_csv(&parsed.to_csv()).unwrap().to_csv(), csv);

        let empty = Report::default();
        let csv = empty.to_csv();
        assert_eq!(csv.lines().count(), 1);
        assert!(parse_report_csv(&csv).unwrap().rows.is_empty());
    }

    fn micro_scenario(kind: ScenarioKind) -> ScenarioSpec {
        let fam = |family, positives, negatives| PatternSpec {
            family,
            positives,
            negatives,
        };
        ScenarioSpec {
            kind,
            tasks: vec![
                TaskSpec {
                    name: "pa".into(),
                    families: vec![fam(PatternFamily::UncheckedArith, 24, 56)],
                },
                TaskSpec {
                    name: "pb".into(),
                    families: vec![fam(PatternFamily::ReachableAssert, 24, 56)],
                },
            ],
            config: ModelConfig {
                vocab_size: 192,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                max_len: 64,
            },
            pretrain_hyper: TrainHyper::default().with_epochs(1),
            finetune_hyper: TrainHyper::default().with_epochs(3),
            lambda: LambdaChoice::Fixed(0.3),
            ratios: (0.7, 0.15, 0.15),
            seed: 7,
            include_joint: false,
        }
    }

    #[test]
    fn single_merge_scenario_shape() {
        let out = run_scenario(&micro_scenario(ScenarioKind::SingleMerge));
        assert!(out.error.is_none(), "{:?}", out.error);
        let r = &out.report;
        // 2 specialist rows + 2 cross + 2 param-mean + 2 yoto
        assert_eq!(r.rows.len(), 8);
        assert_eq!(r.rows_for("yoto").len(), 2);
        assert_eq!(r.rows_for("param-mean").len(), 2);
        assert_eq!(r.rows_for("cross-pa").len(), 1);
        for row in &r.rows {
            assert_eq!(row.split, "test");
        }
        let yoto = r.rows_for("yoto");
        assert!(yoto.iter().all(|row| row.lambda == Some(0.3)));
        // yoto and param-mean cover identical (dataset, split) cells
        let cells = |model: &str| {
            let mut v: Vec<(String, String)> = r
                .rows_for(model)
                .iter()
                .map(|row| (row.dataset.clone(), row.split.clone()))
                .collect();
            v.sort();
            v
        };
        assert_eq!(cells("yoto"), cells("param-mean"));
    }

    #[test]
    fn scenario_is_deterministic() {
        let a = run_scenario(&micro_scenario(ScenarioKind::SingleMerge));
        let b = run_scenario(&micro_scenario(ScenarioKind::SingleMerge));
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn incremental_zero_singles_is_plain_eval() {
        let mut spec = micro_scenario(ScenarioKind::Incremental);
        spec.tasks.truncate(1);
        let out = run_scenario(&spec);
        assert!(out.error.is_none(), "{:?}", out.error);
        // only the stage-0 specialist row
        assert_eq!(out.report.rows.len(), 1);
        assert_eq!(out.report.rows[0].model, "pa");
    }

    #[test]
    fn incremental_stages_grow_by_one_dataset() {
        let mut spec = micro_scenario(ScenarioKind::Incremental);
        spec.tasks.push(TaskSpec {
            name: "pc".into(),
            families: vec![PatternSpec {
                family: PatternFamily::UnreleasedHandle,
                positives: 24,
                negatives: 56,
            }],
        });
        let out = run_scenario(&spec);
        assert!(out.error.is_none(), "{:?}", out.error);
        let r = &out.report;
        assert_eq!(r.rows_for("pa").len(), 1);
        assert_eq!(r.rows_for("pa+pb").len(), 2);
        assert_eq!(r.rows_for("pa+pb+pc").len(), 3);
    }

    /// Shared fixture for the λ-selection tests: a pretrained base, two
    /// binary specialists, their vectors and heads, and the split sets.
    struct MergeFixture {
        base: crate::store::Checkpoint,
        vectors: Vec<VulVector>,
        bank: HeadBank,
        vals: Vec<(String, Dataset)>,
        tests: Vec<(String, Dataset)>,
    }

    fn merge_fixture() -> MergeFixture {
        let spec = micro_scenario(ScenarioKind::SingleMerge);
        let tasks = build_task_datasets(&spec).unwrap();
        let mix = pretrain_mix(&tasks).unwrap();
        let base = pretrain(&mix, &spec.config, &spec.pretrain_hyper)
            .unwrap()
            .checkpoint;
        let mut vectors = Vec::new();
        let mut bank = HeadBank::new();
        let mut vals = Vec::new();
        let mut tests = Vec::new();
        for task in &tasks {
            let (ckpt, _) = finetune(&base, &task.train, &task.name, &spec.finetune_hyper).unwrap();
            vectors.push(compute_vulvector(&ckpt, &base).unwrap());
            bank.add_from(&ckpt, &task.name).unwrap();
            vals.push((task.name.clone(), task.val.clone()));
            tests.push((task.name.clone(), task.test.clone()));
        }
        MergeFixture {
            base,
            vectors,
            bank,
            vals,
            tests,
        }
    }

    fn targets(sets: &[(String, Dataset)]) -> Vec<EvalTarget<'_>> {
        sets.iter()
            .map(|(name, ds)| EvalTarget {
                label: name.clone(),
                head_id: name.clone(),
                dataset: ds,
                scheme: MetricScheme::for_dataset(ds),
            })
            .collect()
    }

    #[test]
    fn select_lambda_contract() {
        let fx = merge_fixture();
        let refs: Vec<&VulVector> = fx.vectors.iter().collect();
        let vals = targets(&fx.vals);

        // singleton grid returns its only element
        let (l, _) = select_lambda(&fx.base, &refs, &fx.bank, &vals, &[0.3]).unwrap();
        assert_eq!(l, 0.3);

        // the default grid contains the reference optima
        let grid = default_lambda_grid();
        assert!(grid.contains(&0.3) && grid.contains(&0.6));

        // argmax contract: the winner's mean val accuracy is maximal
        let (best, report) = select_lambda(&fx.base, &refs, &fx.bank, &vals, &grid).unwrap();
        let mean_for = |l: f32| {
            let rows: Vec<&ReportRow> = report
                .rows
                .iter()
                .filter(|r| r.lambda == Some(l))
                .collect();
            rows.iter().map(|r| r.metrics.accuracy).sum::<f64>() / rows.len() as f64
        };
        let best_score = mean_for(best);
        for &l in &grid {
            assert!(
                best_score >= mean_for(l) - 1e-12,
                "λ={l} beats the winner {best}"
            );
        }

        // empty grid is rejected
        assert!(select_lambda(&fx.base, &refs, &fx.bank, &vals, &[]).is_err());
    }

    #[test]
    fn select_lambda_refuses_test_splits() {
        let fx = merge_fixture();
        let refs: Vec<&VulVector> = fx.vectors.iter().collect();
        let vals = targets(&fx.tests); // deliberate violation
        assert!(matches!(
            select_lambda(&fx.base, &refs, &fx.bank, &vals, &[0.3]),
            Err(YotoError::Invariant(_))
        ));
    }

    #[test]
    fn cross_eval_consistent_with_direct_prediction() {
        let fx = merge_fixture();
        let merged = merge(
            &fx.base,
            &fx.vectors.iter().collect::<Vec<_>>(),
            0.3,
            &fx.bank,
        )
        .unwrap();
        let (name, ds) = &fx.tests[0];
        let m1 = cross_eval(&merged, name, ds, MetricScheme::BinaryPositive).unwrap();
        let preds = predict_dataset(&merged, name, ds).unwrap();
        let m2 = compute_metrics(&preds, &ds.targets(), MetricScheme::BinaryPositive).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn failed_scenario_flushes_marker() {
        let mut spec = micro_scenario(ScenarioKind::SingleMerge);
        spec.tasks[1].name = "pa".into(); // duplicate head id → failure mid-run
        let out = run_scenario(&spec);
        assert!(out.error.is_some());
        let last = out.report.rows.last().unwrap();
        assert_eq!(last.model, "FAILED");
        // marker row still renders as valid CSV
        assert!(parse_report_csv(&out.report.to_csv()).is_ok());
    }
}
