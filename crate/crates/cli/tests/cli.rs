use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smlw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smlw"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = smlw(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let out = dir.join("data");
    ok(&[
        "synth-data",
        "--size",
        "12",
        "--bands",
        "6",
        "--classes",
        "3",
        "--noise",
        "0.05",
        "--seed",
        "2",
        "--out",
        s(&out),
    ]);
    (out.join("cube.hsc"), out.join("gt.hsg"))
}

const TINY: &[&str] = &[
    "--channels",
    "4,4,4,4",
    "--patch",
    "3",
    "--heads",
    "2",
    "--epochs",
    "2",
    "--batch-size",
    "8",
    "--train-frac",
    "0.3",
    "--val-frac",
    "0.1",
    "--normalize",
];

fn train(dir: &Path, cube: &Path, gt: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--cube", s(cube), "--gt", s(gt), "--out", s(&out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn train_writes_per_seed_artifacts_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (cube, gt) = synth(tmp.path());
    let run = train(tmp.path(), &cube, &gt, &["--seeds", "2", "--seed", "5"]);
    for seed in [5, 6] {
        let d = run.join(format!("seed-{seed}"));
        for f in ["model.smlw", "model.json", "history.csv", "metrics.json"] {
            assert!(d.join(f).exists(), "{f}");
        }
        let hist = std::fs::read_to_string(d.join("history.csv")).unwrap();
        assert_eq!(hist.lines().next(), Some("epoch,train_loss,val_oa"));
        assert_eq!(hist.lines().count(), 3);
    }
    let report = json(&run.join("metrics.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([5, 6]));
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 9);

    let eval_dir = tmp.path().join("eval");
    let ckpt = run.join("seed-5/model.smlw");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--out",
        s(&eval_dir),
    ]);
    let seed_metrics = json(&run.join("seed-5/metrics.json"));
    let eval_metrics = json(&eval_dir.join("metrics.json"));
    assert_eq!(seed_metrics["oa"], eval_metrics["oa"]);
    assert_eq!(seed_metrics["confusion"], eval_metrics["confusion"]);

    let map = tmp.path().join("maps/pred.ppm");
    ok(&[
        "predict-map",
        "--checkpoint",
        s(&ckpt),
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--out",
        s(&map),
    ]);
    let bytes = std::fs::read(&map).unwrap();
    assert!(bytes.starts_with(b"P6\n12 12\n255\n"));
    assert_eq!(bytes.len(), "P6\n12 12\n255\n".len() + 12 * 12 * 3);
    assert!(tmp.path().join("maps/pred.manifest.json").exists());
}

#[test]
fn landscape_and_hessian_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (cube, gt) = synth(tmp.path());
    let run = train(tmp.path(), &cube, &gt, &[]);
    let ckpt = run.join("seed-0/model.smlw");
    let land = tmp.path().join("land");
    ok(&[
        "landscape",
        "--checkpoint",
        s(&ckpt),
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--grid",
        "5",
        "--subset",
        "10",
        "--out",
        s(&land),
    ]);
    let csv = std::fs::read_to_string(land.join("grid.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][0], "w_x\\w_y");
    assert_eq!(rows[3][3].parse::<f64>().unwrap(), 0.0);
    let meta = json(&land.join("grid.json"));
    assert_eq!(meta["n"], 5);
    assert_eq!(meta["samples"], 10);
    assert_eq!(meta["precision"], "verify");

    let hess = tmp.path().join("hess");
    ok(&[
        "hessian",
        "--checkpoint",
        s(&ckpt),
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--batches",
        "3",
        "--batch-size",
        "4",
        "--max-iters",
        "20",
        "--out",
        s(&hess),
    ]);
    let eig = json(&hess.join("eigen.json"));
    assert_eq!(eig["samples"].as_array().unwrap().len(), 3);
    assert_eq!(eig["curve"].as_array().unwrap().len(), 256);
    let integral = eig["integral"].as_f64().unwrap();
    assert!((0.95..=1.0).contains(&integral), "{integral}");
}

#[test]
fn complexity_reports_houston_ssa_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "complexity",
        "--mixer",
        "ssa",
        "--depths",
        "3,2,4,2",
        "--channels",
        "96,64,32,16",
        "--patch",
        "11",
        "--out",
        s(tmp.path()),
    ]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let count = printed["parameter_count"].as_f64().unwrap();
    assert!((count / 0.47e6 - 1.0).abs() <= 0.2, "{count}");
    assert_eq!(json(&tmp.path().join("complexity.json"))["report"], printed);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(smlw(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(smlw(&["bogus"]).status.code(), Some(1));
    assert_eq!(smlw(&["--help"]).status.code(), Some(0));
    let missing = tmp.path().join("missing.hsc");
    let out = smlw(&[
        "train",
        "--cube",
        s(&missing),
        "--gt",
        s(&missing),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let (cube, gt) = synth(tmp.path());
    let out = smlw(&[
        "train",
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--out",
        s(tmp.path()),
        "--patch",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let out = smlw(&[
        "train",
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--out",
        s(tmp.path()),
        "--lr",
        "1e30",
        "--epochs",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_merges_under_explicit_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let (cube, gt) = synth(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"channels": [4, 4, 4, 4], "patch": 3, "heads": 2, "epochs": 5, "batch_size": 8, "train_frac": 0.3, "normalize": true}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--cube",
        s(&cube),
        "--gt",
        s(&gt),
        "--epochs",
        "1",
        "--out",
        s(&out),
    ]);
    let hist = std::fs::read_to_string(out.join("seed-0/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 2);
    let side = json(&out.join("seed-0/model.json"));
    assert_eq!(side["spec"]["patch_size"], 3);
    assert!(side["normalize"].as_bool().unwrap());

    std::fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(smlw(&["train", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn verify_mode_reruns_hash_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (cube, gt) = synth(tmp.path());
    let hash = |name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "train",
            "--cube",
            s(&cube),
            "--gt",
            s(&gt),
            "--precision",
            "verify",
            "--out",
            s(&out),
        ];
        args.extend_from_slice(TINY);
        ok(&args);
        json(&out.join("manifest.json"))["content_hash"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(hash("a"), hash("b"));
}
