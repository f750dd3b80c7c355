use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ampose_core::data::{load_dataset, read_records};
use ampose_core::skeleton::Skeleton;

const TINY: [&str; 8] = [
    "--set",
    "model.channels=16",
    "--set",
    "model.depth=1",
    "--set",
    "model.num_heads=2",
    "--set",
    "train.epochs=2",
];

fn ampose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ampose"))
        .args(args)
        .output()
        .expect("spawn ampose")
}

fn ok(args: &[&str]) -> String {
    let out = ampose(args);
    assert!(
        out.status.success(),
        "ampose {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, skeleton: &str, n: usize, seed: u64) -> String {
    let path = dir.join(name);
    ok(&[
        "synth-data",
        "--skeleton",
        skeleton,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&path),
    ]);
    p(&path).to_owned()
}

fn train_tiny(dir: &Path, data: &str, out: &str, extra: &[&str]) -> String {
    let out = dir.join(out);
    let mut args = vec!["train", "--data", data, "--out", p(&out)];
    args.extend(TINY);
    args.extend(["--set", "train.batch_size=8"]);
    args.extend(extra);
    ok(&args);
    p(&out).to_owned()
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", "h36m17", 16, 0);
    let run = train_tiny(dir.path(), &data, "run", &["--seed", "3"]);
    let run = Path::new(&run);
    for f in ["checkpoint.ckpt", "metrics.jsonl", "config.toml", "run.log"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(!run.join("INCOMPLETE").exists());
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("channels = 16"), "{config}");
    assert!(config.contains("seed = 3"), "{config}");
}

#[test]
fn missing_dataset_fails_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = ampose(&[
        "train",
        "--data",
        p(&dir.path().join("nope.jsonl")),
        "--out",
        p(&run),
    ]);
    assert!(!out.status.success());
    assert!(!run.join("checkpoint.ckpt").exists());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.jsonl"), "{err}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", "h36m17", 16, 0);
    let a = train_tiny(dir.path(), &data, "a", &["--seed", "5"]);
    let b = train_tiny(dir.path(), &data, "b", &["--seed", "5", "--deterministic"]);
    let c = train_tiny(dir.path(), &data, "c", &["--seed", "6"]);
    let read = |r: &str| fs::read(Path::new(r).join("checkpoint.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn eval_identity_and_skeleton_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", "h36m17", 8, 0);
    let run = train_tiny(dir.path(), &data, "run", &[]);
    let ckpt = Path::new(&run).join("checkpoint.ckpt");
    let report = dir.path().join("report.json");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        &data,
        "--identity",
        "--out",
        p(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["mpjpe_mm"], 0.0);
    assert_eq!(r["pck"], 1.0);
    assert_eq!(r["auc"], 1.0);

    let other = synth(dir.path(), "h16.jsonl", "h36m16", 4, 0);
    let out = ampose(&["eval", "--checkpoint", p(&ckpt), "--data", &other]);
    assert!(!out.status.success());
}

#[test]
fn predict_is_complete_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", "h36m17", 8, 0);
    let test = synth(dir.path(), "test.jsonl", "h36m17", 10, 1);
    let run = train_tiny(dir.path(), &data, "run", &[]);
    let ckpt = Path::new(&run).join("checkpoint.ckpt");
    let (o1, o2) = (dir.path().join("p1.jsonl"), dir.path().join("p2.jsonl"));
    for o in [&o1, &o2] {
        ok(&[
            "predict",
            "--checkpoint",
            p(&ckpt),
            "--data",
            &test,
            "--out",
            p(o),
        ]);
    }
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    assert_eq!(read_records(&o1).unwrap().len(), 10);
    let skel = Skeleton::builtin("h36m17").unwrap();
    assert_eq!(load_dataset(&o1, &skel).unwrap().len(), 10);
}

#[test]
fn inspect_three_chain() {
    let dir = tempfile::tempdir().unwrap();
    let skel = dir.path().join("chain.skel");
    fs::write(&skel, "num_joints = 3\nroot = 0\nedge = 0 1\nedge = 1 2\n").unwrap();
    let set = format!("model.skeleton={:?}", p(&skel));
    let out = ok(&[
        "inspect",
        "--set",
        &set,
        "--set",
        "model.channels=16",
        "--set",
        "model.num_heads=2",
    ]);
    assert!(out.contains("hop [0, 1, 2]"), "{out}");
    assert!(out.contains("normalized group 3"), "{out}");
}

#[test]
fn inspect_default_config_reports_size() {
    let out = ok(&["inspect"]);
    assert!(out.contains("params 18.43"), "{out}");
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nchannels = 30\nnum_heads = 8\n").unwrap();
    let out = ampose(&["inspect", "--config", p(&cfg)]);
    assert!(!out.status.success());
    fs::write(&cfg, "[model]\nno_such_key = 1\n").unwrap();
    assert!(!ampose(&["inspect", "--config", p(&cfg)]).status.success());
    assert!(!ampose(&["inspect", "--set", "model.depth=0"])
        .status
        .success());
}

#[test]
fn gradcheck_default_passes_and_large_model_is_refused() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("PASS"), "{out}");
    let big = ampose(&[
        "gradcheck",
        "--set",
        "model.channels=512",
        "--set",
        "model.depth=5",
    ]);
    assert!(!big.status.success());
    assert!(String::from_utf8_lossy(&big.stderr).contains("refusing"));
}

#[test]
fn convert_raw_records() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    let kp: Vec<[f64; 2]> = (0..5).map(|i| [500.0 + i as f64, 400.0]).collect();
    let j3: Vec<[f64; 3]> = (0..5).map(|i| [10.0 * i as f64, 20.0, 4000.0]).collect();
    let line = serde_json::json!({
        "keypoints_2d": kp, "joints_3d": j3, "width": 1000.0, "height": 1000.0, "action": "Walk"
    });
    fs::write(&raw, format!("{line}\n")).unwrap();
    let out = dir.path().join("conv.jsonl");
    ok(&[
        "convert",
        "--skeleton",
        "tiny5",
        "--data",
        p(&raw),
        "--out",
        p(&out),
    ]);
    let data = load_dataset(&out, &Skeleton::builtin("tiny5").unwrap()).unwrap();
    assert_eq!(data.len(), 1);
    assert_eq!(data.samples[0].meta.action.as_deref(), Some("Walk"));
    assert_eq!(data.samples[0].pose3d.row(0), &[0.0, 0.0, 0.0]);
}
