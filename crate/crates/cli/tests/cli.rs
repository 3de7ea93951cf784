use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ponderlm"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"{
    "model": {"vocab_size": 300, "d_model": 16, "n_layers": 1, "n_heads": 2, "context_len": 16},
    "train": {"peak_lr": 0.003, "warmup_steps": 2, "total_steps": 6, "seed": 5,
              "batch": {"batch_size_tokens": 64, "context_len": 16, "seed": 1}},
    "data": {"train": ["train.bin"], "valid": ["valid.bin"], "tokenizer": "tok.json",
             "eval_windows_per_batch": 8, "analysis_sequences": 2}
}"#;

/// Corpus, tokenizer, shards and config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["data", "synth", "--out", "corpus.txt", "--bytes", "20000"],
    );
    ok(
        d,
        &[
            "tokenizer",
            "train",
            "--input",
            "corpus.txt",
            "--vocab-size",
            "300",
            "--out",
            "tok.json",
        ],
    );
    ok(
        d,
        &[
            "data",
            "encode",
            "--tokenizer",
            "tok.json",
            "--input",
            "corpus.txt",
            "--out",
            "train.bin",
            "--valid-fraction",
            "0.1",
            "--valid-out",
            "valid.bin",
        ],
    );
    fs::write(d.join("c.json"), CONFIG).unwrap();
    dir
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline() {
    let dir = workspace();
    let d = dir.path();
    assert!(d.join("train.bin.manifest.json").exists());

    ok(d, &["train", "--config", "c.json", "--name", "a"]);
    ok(d, &["train", "--config", "c.json", "--name", "b"]);
    let a = fs::read(d.join("runs/a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("runs/b/metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 7);
    for f in [
        "manifest.json",
        "ckpt/config.json",
        "ckpt/params.bin",
        "ckpt/optim.bin",
        "ckpt/meta.json",
        "report/eval.json",
    ] {
        assert!(d.join("runs/a").join(f).exists(), "missing {f}");
    }

    // the manifest alone reproduces the run
    ok(
        d,
        &[
            "train",
            "--config",
            "runs/a/manifest.json",
            "--name",
            "from_manifest",
        ],
    );
    assert_eq!(
        a,
        fs::read(d.join("runs/from_manifest/metrics.csv")).unwrap()
    );

    ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--name",
            "p",
            "--mechanism",
            "ponder",
            "--steps",
            "3",
        ],
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&read(d.join("runs/p/manifest.json"))).unwrap();
    let ponder = &manifest["config"]["train"]["mechanism"]["ponder"];
    assert_eq!(ponder["schedule"]["fixed"], 3);
    assert_eq!(ponder["top_k"], 100);
    assert_eq!(ponder["renormalize_topk"], true);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);

    let ppl: serde_json::Value = serde_json::from_str(&ok(
        d,
        &[
            "eval",
            "ppl",
            "--checkpoint",
            "runs/p/ckpt",
            "--data",
            "valid.bin",
        ],
    ))
    .unwrap();
    assert_eq!(ppl["steps"], 3);
    assert!(ppl["ppl"].as_f64().unwrap() > 1.0);

    let sweep = ok(
        d,
        &[
            "eval",
            "sweep",
            "--checkpoint",
            "runs/p/ckpt",
            "--data",
            "valid.bin",
            "--steps",
            "1..10",
        ],
    );
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "steps,loss,ppl");
    assert_eq!(lines.len(), 11);

    let table = ok(
        d,
        &[
            "trace",
            "--checkpoint",
            "runs/p/ckpt",
            "--tokenizer",
            "tok.json",
            "--prompt",
            "The cat is",
            "--display-k",
            "1",
            "--out-dir",
            "tr",
        ],
    );
    assert!(table.contains("final"));
    assert_eq!(read(d.join("tr/trace.jsonl")).lines().count(), 4);
    assert_eq!(read(d.join("tr/steps.jsonl")).lines().count(), 4);

    ok(
        d,
        &[
            "analyze",
            "--trace",
            "tr/trace.bin",
            "--top-m",
            "1",
            "--out",
            "an1",
        ],
    );
    assert_eq!(read(d.join("an1/cosine.csv")).lines().count(), 4);
    ok(
        d,
        &[
            "analyze",
            "--checkpoint",
            "runs/p/ckpt",
            "--data",
            "valid.bin",
            "--sequences",
            "2",
            "--out",
            "an2",
        ],
    );
    assert_eq!(read(d.join("an2/spectral.csv")).lines().count(), 5);
    assert!(read(d.join("an2/manifest.json")).contains("checkpoint_hash"));

    let flops: serde_json::Value = serde_json::from_str(&ok(
        d,
        &[
            "flops",
            "--config",
            "c.json",
            "--mechanism",
            "ponder",
            "--steps",
            "3",
        ],
    ))
    .unwrap();
    let r = flops["ratio_to_vanilla"].as_f64().unwrap();
    assert!(r > 4.0, "{r}");
}

#[test]
fn warm_start_and_resume() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--config", "c.json", "--name", "v"]);
    ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--name",
            "cpt",
            "--warm-start",
            "runs/v/ckpt",
            "--mechanism",
            "ponder",
            "--steps",
            "1",
            "--top-k",
            "10",
        ],
    );
    assert_eq!(read(d.join("runs/cpt/metrics.csv")).lines().count(), 7);

    // interrupted run resumed from its checkpoint matches an uninterrupted one
    ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--name",
            "r",
            "--stop-at",
            "3",
        ],
    );
    ok(
        d,
        &["train", "--config", "c.json", "--name", "r", "--resume"],
    );
    assert_eq!(
        read(d.join("runs/r/metrics.csv")),
        read(d.join("runs/v/metrics.csv"))
    );
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(d, &["train", "--config", "c.json", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));

    let out = run(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--mechanism",
            "ponder",
            "--step-range",
            "5..2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("5..2"));

    fs::write(
        d.join("bad.json"),
        CONFIG.replace(r#""vocab_size": 300, "#, ""),
    )
    .unwrap();
    let out = run(d, &["train", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab_size"));

    fs::write(
        d.join("typo.json"),
        CONFIG.replace("\"warmup_steps\"", "\"warmpu_steps\""),
    )
    .unwrap();
    assert_eq!(
        run(d, &["train", "--config", "typo.json"]).status.code(),
        Some(1)
    );

    fs::write(
        d.join("small.json"),
        CONFIG.replace(r#""vocab_size": 300"#, r#""vocab_size": 200"#),
    )
    .unwrap();
    let out = run(d, &["train", "--config", "small.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));

    let out = run(
        d,
        &[
            "trace",
            "--checkpoint",
            "missing",
            "--tokenizer",
            "tok.json",
            "--prompt",
            "",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}
