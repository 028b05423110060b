use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use octgan_core::dataset::{make_samples, scan_dataset, split};
use octgan_core::{EvalReport, RunConfig};
use tempfile::tempdir;

const SMALL: &[&str] = &[
    "height=32",
    "width=32",
    "batch_size=4",
    "base_channels=4",
    "disc_base_width=4",
    "encoder_channels=4",
    "encoder_out_channels=4",
    "epochs=1",
    "n_visits_in=3",
    "phantom.n_eyes=8",
    "phantom.visits_min=4",
    "phantom.visits_max=5",
    "phantom.n_bscans=2",
    "phantom.height=32",
    "phantom.width=32",
    "phantom.bands=0.8:3,0.4:6,0.6:4",
    "phantom.pit_bands=2",
    "phantom.pit_depth=3",
    "phantom.pit_width=5",
    "phantom.surface_row=6",
];

fn octgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octgan")).args(args).output().expect("spawn octgan")
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_owned))
        .unwrap_or_else(|| panic!("no {key}= in {}", stdout(o)))
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Train once on a small phantom under `dir`; returns the output directory.
fn train_small(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let o = octgan(&with_sets(
        vec!["train", "--phantom", "--out", out.to_str().unwrap()],
        SMALL,
    ));
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    out
}

#[test]
fn train_predict_evaluate() {
    let dir = tempdir().unwrap();
    let out = train_small(dir.path());
    for f in ["checkpoint.octg", "train_report.csv", "resolved_config.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let ckpt = out.join("checkpoint.octg");
    let phantom = out.join("phantom");
    let before = tree(&phantom);

    // predict with three frames of eye 0, scan 1
    let frame = |v: usize| phantom.join(format!("eye_000/visit_{v:02}/bscan_001.pgm"));
    let (f0, f1, f2, truth) = (frame(0), frame(1), frame(2), frame(3));
    let pred_dir = dir.path().join("pred");
    let o = octgan(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--frames",
        f0.to_str().unwrap(),
        f1.to_str().unwrap(),
        f2.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: f64 = value(&o, "ssim").parse().unwrap();
    assert!((-1.0..=1.0).contains(&s));
    let img = fs::read(pred_dir.join("prediction.pgm")).unwrap();
    assert!(img.starts_with(b"P5"));
    assert_eq!(img.len(), fs::read(&f0).unwrap().len());
    assert!(pred_dir.join("resolved_config.txt").is_file());

    // two frames to a three-frame checkpoint
    let o = octgan(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--frames",
        f0.to_str().unwrap(),
        f1.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expects 3 frames, 2 given"), "{}", stderr(&o));

    let eval_dir = dir.path().join("eval");
    let pairs = dir.path().join("pairs");
    let o = octgan(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--pairs-dir",
        pairs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = EvalReport::parse_csv(&fs::read_to_string(eval_dir.join("eval_report.csv")).unwrap()).unwrap();

    // row count from the manifest-derived test split
    let cfg = RunConfig::load(&out.join("resolved_config.txt")).unwrap();
    let test = split(&scan_dataset(&phantom).unwrap(), &cfg.split).unwrap().test;
    let expected: usize = test.eyes.iter().map(|e| (e.visits.len() - 3) * e.n_bscans()).sum();
    assert_eq!(report.rows.len(), expected);
    assert_eq!(make_samples(&test, 3).unwrap().len(), expected);
    assert_eq!(value(&o, "n_pairs"), expected.to_string());
    let printed: f64 = value(&o, "mean_ssim").parse().unwrap();
    assert!((printed - report.mean_ssim()).abs() < 1e-9);

    let written = fs::read_dir(&pairs).unwrap().count();
    assert_eq!(written, 2 * expected);
    for r in &report.rows {
        for kind in ["truth", "pred"] {
            assert!(pairs.join(format!("{}_{}_{}_{kind}.pgm", r.eye, r.visit, r.bscan)).is_file());
        }
    }
    assert_eq!(tree(&phantom), before, "dataset tree was modified");

    // evaluation may not change training keys
    let o = octgan(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--set",
        "n_visits_in=2",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn snapshot_reproduces_training() {
    let dir = tempdir().unwrap();
    let first = train_small(dir.path());
    let again = dir.path().join("again");
    let o = octgan(&[
        "train",
        "--config",
        first.join("resolved_config.txt").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("checkpoint.octg")).unwrap(),
        fs::read(again.join("checkpoint.octg")).unwrap()
    );
    assert_eq!(
        fs::read(first.join("train_report.csv")).unwrap(),
        fs::read(again.join("train_report.csv")).unwrap()
    );
}

#[test]
fn config_and_data_errors() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let o = octgan(&["train", "--phantom", "--out", out, "--set", "n_visits_in=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_visits_in"), "{}", stderr(&o));

    let o = octgan(&["train", "--phantom", "--out", out, "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"));

    let missing = dir.path().join("missing");
    let root = format!("dataset_root={}", missing.display());
    let o = octgan(&["train", "--out", out, "--set", &root]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = octgan(&["train", "--out", out, "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let bogus = dir.path().join("bogus.octg");
    fs::write(&bogus, b"nope").unwrap();
    let o = octgan(&["evaluate", "--checkpoint", bogus.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error="));

    assert_eq!(octgan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(octgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn phantom_is_reproducible() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        let o = octgan(&with_sets(
            vec!["phantom", "--out", p.to_str().unwrap(), "--set", "phantom.seed=7"],
            &SMALL[9..],
        ));
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(value(&o, "n_eyes"), "8");
    }
    assert_eq!(tree(&a), tree(&b));
    let snap = fs::read_to_string(a.join("resolved_config.txt")).unwrap();
    assert!(snap.lines().any(|l| l == "phantom.seed=7"));
    assert!(a.join("manifest.txt").is_file());
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let o = octgan(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let lines: Vec<_> = stdout(&o).lines().filter(|l| l.starts_with("op=")).map(str::to_owned).collect();
    assert!(lines.iter().all(|l| l.ends_with("status=ok")));
    for op in ["conv2d", "conv3d", "conv_transpose2d", "batch_norm", "generator", "discriminator"] {
        assert!(lines.iter().any(|l| l.starts_with(&format!("op={op}"))), "no line for {op}");
    }

    let o = octgan(&["gradcheck", "--precision", "f64", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("failed=") && stdout(&o).contains("conv2d"), "{}", stdout(&o));
}
