use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradfree::data_io::{write_idx, ImageBatch};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradfree"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 60 deterministic 4×4 images.
fn small_dataset(dir: &Path) -> PathBuf {
    let pixels = (0..60 * 16)
        .map(|i| ((i * 37 + i / 16 * 11) % 256) as f64 / 255.0)
        .collect();
    let path = dir.join("small.idx");
    write_idx(&ImageBatch::new(60, 1, 4, 4, pixels).unwrap(), &path).unwrap();
    path
}

/// Header claiming 60000 28×28 images, with no pixel data behind it.
fn header_only(dir: &Path) -> PathBuf {
    let mut bytes = Vec::new();
    for v in [0x803u32, 60_000, 28, 28] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let path = dir.join("header.idx");
    fs::write(&path, bytes).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_reads_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let data = header_only(dir.path());
    let ok = bin(&["validate", "--arch", "128,256,784", "--dataset", s(&data)]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("inverse funnel"));

    let bad = bin(&["validate", "--arch", "256,128", "--dataset", s(&data)]);
    assert_ne!(bad.status.code(), Some(0));
    assert!(stdout(&bad).contains("InverseFunnelViolation"));
    assert!(stderr(&bad).starts_with("error kind=InvalidArchitecture"));
}

fn train_into(dataset: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--dataset",
        s(dataset),
        "--arch",
        "3,6,16",
        "--epochs",
        "3",
        "--seed",
        "5",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    bin(&args)
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train_into(&data, &a, &["--workers", "1"]);
    assert_eq!(ra.status.code(), Some(0), "{}", stderr(&ra));
    let rb = train_into(&data, &b, &["--workers", "2"]);
    assert_eq!(rb.status.code(), Some(0), "{}", stderr(&rb));
    for f in [
        "model.star",
        "metrics.csv",
        "reconstruction.pgm",
        "data.pgm",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,layer,phase,linear_residual,elastic_loss\n"));
    assert!(stdout(&ra).contains("level 3:"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("cfg");
    fs::write(
        &cfg,
        format!(
            "# small run\narch = 3,6,16\ndataset = {}\nepochs = 1\nplateau_tol = 0.5\nout = {}\n",
            s(&data),
            s(&out)
        ),
    )
    .unwrap();
    let r = bin(&[
        "train",
        "--config",
        s(&cfg),
        "--epochs",
        "2",
        "--plateau-tol",
        "1e-300",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("2,")));

    fs::write(&cfg, "colour = blue\n").unwrap();
    let r = bin(&["train", "--config", s(&cfg)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(stderr(&r).starts_with("error kind=Config"));
}

#[test]
fn infer_reconstruct_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    assert_eq!(
        train_into(&data, &out, &["--progress-images"])
            .status
            .code(),
        Some(0)
    );
    assert!(out.join("progress_level3_epoch1_SL.pgm").exists());

    let r = bin(&["infer", "--dataset", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let code = out.join("latents_level1.csv");
    assert!(code.exists() && out.join("latents_level2.csv").exists());

    let r = bin(&[
        "reconstruct",
        "--latents",
        s(&code),
        "--level",
        "1",
        "--out",
        s(&out),
        "--image-shape",
        "1x4x4",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert!(out.join("reconstruction.pgm").exists());

    let r = bin(&["diagnose", "--dataset", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let csv = fs::read_to_string(out.join("residuals_level3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert!(out.join("residuals_level2.csv").exists());
}

#[test]
fn errors_have_kinds_and_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let model = dir.path().join("junk.star");
    fs::write(&model, b"JUNKJUNKJUNK").unwrap();
    let r = bin(&[
        "infer",
        "--dataset",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(r.status.code(), Some(11));
    let line = stderr(&r);
    assert!(line.starts_with("error kind=BadMagic message=\""), "{line}");
    assert_eq!(line.trim_end().lines().count(), 1);

    let r = bin(&[
        "train",
        "--dataset",
        s(&data),
        "--arch",
        "3,6,17",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(r.status.code(), Some(4), "{}", stderr(&r));

    let r = bin(&[
        "train",
        "--dataset",
        s(&dir.path().join("missing.idx")),
        "--arch",
        "3,6,16",
    ]);
    assert_eq!(r.status.code(), Some(14));

    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}
