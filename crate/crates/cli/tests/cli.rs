use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn maf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maf"))
        .args(args)
        .env_remove("MAF_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Synth {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Synth {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut args = vec!["synth", "--out", s(&root)];
        args.extend_from_slice(extra);
        let out = maf(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Synth { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        s(&self.root.join(name)).to_string()
    }

    fn data_args(&self) -> Vec<String> {
        vec![
            "--data".into(),
            self.path("images.jsonl"),
            "--features".into(),
            self.path("features.maff"),
        ]
    }
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    maf(&refs)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let start = text.find('{').expect("json report in stdout");
    serde_json::from_str(&text[start..]).unwrap()
}

#[test]
fn synth_is_idempotent_and_honors_seed_env() {
    let a = Synth::new(&["--images", "20", "--seed", "3"]);
    let b = Synth::new(&["--images", "20", "--seed", "3"]);
    let dir = tempfile::tempdir().unwrap();
    let env_run = Command::new(env!("CARGO_BIN_EXE_maf"))
        .args(["synth", "--out", s(dir.path()), "--images", "20"])
        .env("MAF_SEED", "3")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    let stderr = String::from_utf8_lossy(&env_run.stderr);
    assert!(stderr.contains("\"seed\":3"), "{stderr}");
    for f in ["images.jsonl", "features.maff", "embeddings.txt"] {
        let x = std::fs::read(a.root.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.root.join(f)).unwrap(), "{f}");
        assert_eq!(x, std::fs::read(dir.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn whole_baseline_predicts_full_image() {
    let d = Synth::new(&["--images", "15"]);
    let preds = d.path("whole.jsonl");
    let mut args = vec!["baseline".to_string(), "--method".into(), "whole".into(), "--out".into(), preds.clone()];
    args.extend(d.data_args());
    let out = run(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().count(), 15 * 5 * 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["box"], serde_json::json!([0.0, 0.0, 100.0, 100.0]));
    }
}

#[test]
fn exit_codes() {
    let d = Synth::new(&["--images", "5"]);

    let mut eval = vec!["eval".to_string(), "--embeddings".into(), d.path("embeddings.txt")];
    eval.extend(d.data_args());
    assert_eq!(run(eval).status.code(), Some(1), "weak eval without --model");

    assert_eq!(maf(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(maf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(maf(&["train", "--help"]).status.code(), Some(0));

    let mut missing = vec!["baseline".to_string(), "--method".into(), "max".into()];
    missing.extend(["--data".into(), d.path("nope.jsonl"), "--features".into(), d.path("features.maff")]);
    assert_eq!(run(missing).status.code(), Some(2));

    let mut bad_model = vec!["eval".to_string(), "--embeddings".into(), d.path("embeddings.txt")];
    bad_model.extend(["--model".into(), d.path("embeddings.txt")]);
    bad_model.extend(d.data_args());
    assert_eq!(run(bad_model).status.code(), Some(2), "not a checkpoint");

    let ok = maf(&["gradcheck", "--seed", "4"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    assert_eq!(maf(&["gradcheck", "--seed", "4", "--tolerance", "0"]).status.code(), Some(3));
}

#[test]
fn train_then_eval_recovers_planted_alignment() {
    let d = Synth::new(&[]);
    let train = |out: &str, threads: &str| {
        let mut args = vec![
            "--threads".to_string(),
            threads.into(),
            "train".into(),
            "--embeddings".into(),
            d.path("embeddings.txt"),
            "--out".into(),
            d.path(out),
            "--lr".into(),
            "1e-3".into(),
        ];
        args.extend(d.data_args());
        let o = run(args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("a.ckpt", "1");
    train("b.ckpt", "3");
    assert_eq!(
        std::fs::read(d.root.join("a.ckpt")).unwrap(),
        std::fs::read(d.root.join("b.ckpt")).unwrap()
    );
    let csv = std::fs::read_to_string(d.root.join("a.ckpt.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,mean_loss,wallclock_s"));
    assert_eq!(csv.lines().count(), 26);

    let eval = |report: &str| {
        let mut args = vec![
            "eval".to_string(),
            "--embeddings".into(),
            d.path("embeddings.txt"),
            "--model".into(),
            d.path("a.ckpt"),
            "--report".into(),
            d.path(report),
        ];
        args.extend(d.data_args());
        run(args)
    };
    let out = eval("r1.json");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    assert!(acc <= report["upper_bound"].as_f64().unwrap());
    eval("r2.json");
    assert_eq!(
        std::fs::read(d.root.join("r1.json")).unwrap(),
        std::fs::read(d.root.join("r2.json")).unwrap()
    );

    // predictions written by infer score the same through --predictions
    let mut infer = vec![
        "infer".to_string(),
        "--mode".into(),
        "weak".into(),
        "--embeddings".into(),
        d.path("embeddings.txt"),
        "--model".into(),
        d.path("a.ckpt"),
        "--out".into(),
        d.path("p.jsonl"),
    ];
    infer.extend(d.data_args());
    assert!(run(infer).status.success());
    let mut scored = vec!["eval".to_string(), "--predictions".into(), d.path("p.jsonl")];
    scored.extend(d.data_args());
    let out = run(scored);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn unsupervised_mode_needs_no_model() {
    let d = Synth::new(&["--images", "30", "--duplicate-labels"]);
    let mut args = vec![
        "eval".to_string(),
        "--mode".into(),
        "unsup".into(),
        "--embeddings".into(),
        d.path("embeddings.txt"),
        "--pixel-plus-one".into(),
    ];
    args.extend(d.data_args());
    let out = run(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["method"], "unsup");
    assert_eq!(report["area_convention"], "pixel-plus-one");
}
