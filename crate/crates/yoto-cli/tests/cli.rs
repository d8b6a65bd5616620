//! End-to-end exercises of the command-line surface on micro-scale runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn yoto() -> Command {
    Command::new(env!("CARGO_BIN_EXE_yoto"))
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_tiny_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let out = yoto()
        .args(["gen-corpus", "--out"])
        .arg(dir)
        .args([
            "--seed",
            "11",
            "--pattern",
            "pa=unchecked-arith:20/60",
            "--pattern",
            "pb=reachable-assert:20/60",
        ])
        .output()
        .unwrap();
    ok(&out);
    (dir.join("pa.jsonl"), dir.join("pb.jsonl"))
}

const TINY_MODEL: [&str; 12] = [
    "--vocab-size", "192", "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff",
    "32", "--max-len", "64",
];

fn pretrain_tiny(data: &[&Path], out: &Path) {
    let mut cmd = yoto();
    cmd.arg("pretrain");
    for d in data {
        cmd.arg("--data").arg(d);
    }
    cmd.arg("--out").arg(out);
    cmd.args(TINY_MODEL);
    cmd.args(["--epochs", "1", "--seed", "5"]);
    ok(&cmd.output().unwrap());
}

#[test]
fn lambda_zero_apply_preserves_base_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, _) = gen_tiny_corpus(&dir.path().join("data"));
    let base = dir.path().join("base.yoto");
    pretrain_tiny(&[&pa], &base);

    let ft = dir.path().join("ft.yoto");
    let out = yoto()
        .arg("finetune")
        .arg("--base")
        .arg(&base)
        .arg("--data")
        .arg(&pa)
        .args(["--head", "pa", "--epochs", "2", "--seed", "7"])
        .arg("--out")
        .arg(&ft)
        .output()
        .unwrap();
    ok(&out);

    let vec_path = dir.path().join("pa.vec.yoto");
    ok(&yoto()
        .arg("vec")
        .arg("diff")
        .arg("--finetuned")
        .arg(&ft)
        .arg("--base")
        .arg(&base)
        .arg("--out")
        .arg(&vec_path)
        .output()
        .unwrap());

    let merged = dir.path().join("merged.yoto");
    ok(&yoto()
        .arg("vec")
        .arg("apply")
        .arg("--base")
        .arg(&base)
        .arg("--vec")
        .arg(&vec_path)
        .args(["--lambda", "0"])
        .arg("--head-from")
        .arg(format!("pa={}", ft.display()))
        .arg("--out")
        .arg(&merged)
        .output()
        .unwrap());

    let base_ckpt = yoto_core::store::load(&base).unwrap();
    let merged_ckpt = yoto_core::store::load(&merged).unwrap();
    assert_eq!(base_ckpt.fingerprint(), merged_ckpt.fingerprint());
    assert!(merged_ckpt.params.has_head("pa"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (pa1, _) = gen_tiny_corpus(&dir.path().join("one"));
    let (pa2, _) = gen_tiny_corpus(&dir.path().join("two"));
    assert_eq!(
        std::fs::read(&pa1).unwrap(),
        std::fs::read(&pa2).unwrap(),
        "gen-corpus must be deterministic"
    );

    let ck1 = dir.path().join("b1.yoto");
    let ck2 = dir.path().join("b2.yoto");
    pretrain_tiny(&[&pa1], &ck1);
    pretrain_tiny(&[&pa1], &ck2);
    assert_eq!(
        std::fs::read(&ck1).unwrap(),
        std::fs::read(&ck2).unwrap(),
        "pretrain must be byte-deterministic"
    );
}

#[test]
fn scenario_multi_writes_table_shaped_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
seed = 9

[model]
vocab_size = 192
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_len = 64

[pretrain]
epochs = 1

[finetune]
epochs = 3

[lambda]
fixed = 0.3

[[tasks]]
name = "ta"
families = [
  { family = "unchecked-arith", positives = 16, negatives = 40 },
  { family = "reachable-assert", positives = 16, negatives = 40 },
]

[[tasks]]
name = "tb"
families = [
  { family = "unreleased-handle", positives = 16, negatives = 40 },
  { family = "privilege-call", positives = 16, negatives = 40 },
]
"#,
    )
    .unwrap();

    let out_dir = dir.path().join("run");
    let out = yoto()
        .args(["scenario", "multi", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    ok(&out);

    let report = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let parsed = yoto_core::eval::parse_report_csv(&report).unwrap();
    for model in ["ta", "tb", "cross-ta", "cross-tb", "param-mean", "yoto", "joint"] {
        assert!(
            parsed.rows.iter().any(|r| r.model == model),
            "missing rows for {model}\n{report}"
        );
    }
    // yoto rows carry the fixed λ
    assert!(parsed
        .rows
        .iter()
        .filter(|r| r.model == "yoto")
        .all(|r| r.lambda == Some(0.3)));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    for key in ["command", "inputs", "seeds", "outputs"] {
        assert!(manifest.get(key).is_some(), "manifest key {key}");
    }
}

#[test]
fn exit_codes_and_error_lines() {
    // unknown subcommand → usage error, exit 2
    let out = yoto().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // validation failure → exit 1 with a one-line error on stderr
    let out = yoto()
        .args(["finetune", "--base", "/nonexistent.yoto", "--data", "/nonexistent.jsonl"])
        .args(["--head", "h", "--out", "/tmp/never.yoto"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().next().unwrap_or_default();
    assert!(line.starts_with("error: "), "stderr: {stderr}");
}
