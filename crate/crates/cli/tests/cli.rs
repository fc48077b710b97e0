use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cpggan")).args(args).env("RUST_LOG", "warn").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("phantom.toml"),
        "image_size = 32\nsubjects = 10\nslices_per_subject = 4\ntumor_radius_range = [2.0, 4.0]\n",
    )
    .unwrap();
    std::fs::write(
        d.join("gan.toml"),
        "[model]\ntarget_resolution = 32\nfmap_base = 64\nfmap_max = 8\nlatent_dim = 16\n\n[train]\nbatch_size = 4\nfade_images = 8\nstable_images = 8\n",
    )
    .unwrap();
    let data = d.join("data");
    let out = run(&["phantom-gen", "--spec", p(&d.join("phantom.toml")), "--seed", "1", "--out", p(&data)]);
    assert!(out.contains("train: "));
    assert!(data.join("test.txt").exists());

    let gan = d.join("gan");
    run(&["train-gan", "--config", p(&d.join("gan.toml")), "--data", p(&data), "--out", p(&gan), "--steps", "3"]);
    assert!(gan.join("cpggan-final.ckpt").exists());
    let losses = std::fs::read_to_string(gan.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);

    let syn = d.join("syn");
    let out = run(&[
        "sample", "--ckpt", p(&gan.join("cpggan-final.ckpt")), "--data", p(&data), "--count", "6", "--filter-contrast", "0", "--out", p(&syn),
    ]);
    assert!(out.starts_with("6 images written"), "{out}");

    let det = d.join("det");
    let out = run(&[
        "train-detector", "--data", p(&data), p(&syn), "--train-res", "32", "--eval-res", "32", "--steps", "2", "--out", p(&det),
    ]);
    assert!(out.contains("adding 6 synthetic images"));
    let csv = std::fs::read_to_string(det.join("results.csv")).unwrap();
    assert!(csv.starts_with("setup,sensitivity_iou50"));
    assert!(det.join("detector-selected.ckpt").exists());

    let out = run(&[
        "tsne", "--real", p(&data), "--synthetic", p(&syn), "--mode", "images", "--size", "8", "--perplexity", "3", "--iterations", "50",
        "--per-category", "10", "--out-png", p(&d.join("t.png")), "--out-csv", p(&d.join("t.csv")),
    ]);
    assert!(out.contains("embedding 16 vectors of dimension 64"), "{out}");
    let pts = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert_eq!(pts.lines().count(), 17);
    assert!(pts.lines().last().unwrap().ends_with(",synthetic"));
    assert_eq!(image::open(d.join("t.png")).unwrap().width(), 800);

    let pools = d.join("pools");
    run(&["vtt-prepare", "--data", p(&data), "--split", "test", "--kind", "crop32_plain", "--label", "real", "--pools", p(&pools)]);
    let n = std::fs::read_dir(pools.join("crop32_plain/real")).unwrap().count();
    assert!(n > 0);
}

#[test]
fn experiment_skips_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("phantom.toml"),
        "image_size = 32\nsubjects = 10\nslices_per_subject = 3\ntumor_radius_range = [2.0, 4.0]\n",
    )
    .unwrap();
    run(&["phantom-gen", "--spec", p(&d.join("phantom.toml")), "--out", p(&d.join("data"))]);
    std::fs::write(
        d.join("matrix.toml"),
        "seed = 3\ndata = \"data\"\nsetups = [\"real_only\", \"cpggan_4k\"]\n\n[checkpoints]\ncpggan = \"missing.ckpt\"\n\n[detector]\ntrain_res = 32\neval_res = 32\nsteps = 2\neval_every = 1\nbatch_size = 2\nnum_anchors = 2\n",
    )
    .unwrap();
    let out = run(&["experiment", "--matrix", p(&d.join("matrix.toml")), "--out", p(&d.join("results.csv"))]);
    assert!(out.contains("skipped cpggan_4k"), "{out}");
    let csv = std::fs::read_to_string(d.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("real_only,"));
    assert!(d.join("results_runs/leakage.json").exists());
    assert!(d.join("results_runs/matrix.toml").exists());
}
