use std::fs;
use std::path::Path;
use std::process::Command;

fn slp(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_slp")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "slp {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    slp(d, &["generate-data", "--antennas", "2", "--users", "2", "--count", "40", "--seed", "1", "--out", "train.bin"]);
    slp(d, &["generate-data", "--antennas", "2", "--users", "2", "--count", "6", "--seed", "2", "--out", "test.bin"]);

    slp(d, &["solve", "--data", "test.bin", "--snr-db", "10", "--out", "ipm.csv"]);
    let ipm = fs::read_to_string(d.join("ipm.csv")).unwrap();
    assert_eq!(ipm.lines().next().unwrap(), "sample_id,snr_db,power,max_margin,iters");
    assert_eq!(ipm.lines().count(), 7);

    slp(d, &[
        "train", "--data", "train.bin", "--puu-iters", "1", "--ppu-iters", "1", "--epochs-per-iter", "2", "--batch", "10",
        "--trace", "trace.csv", "--out", "fp32.slpm",
    ]);
    assert!(fs::read_to_string(d.join("trace.csv")).unwrap().lines().count() > 1);
    slp(d, &["quantize", "--model", "fp32.slpm", "--bits", "binary", "--out", "binary.slpm"]);
    slp(d, &["quantize", "--model", "fp32.slpm", "--bits", "ternary", "--out", "ternary.slpm"]);

    fs::write(
        d.join("eval.toml"),
        "snr_points = [5.0, 15.0]\nerror_bounds = [0.0]\n\
         methods = [\"ipm\", \"dnet_fp32\", \"dnet_binary\", \"dnet_ternary\"]\n\
         samples = 6\nseed = 3\nantennas = 2\nusers = 2\nwarmup = 10\n[models]\n\
         dnet_fp32 = \"fp32.slpm\"\ndnet_binary = \"binary.slpm\"\ndnet_ternary = \"ternary.slpm\"\n",
    )
    .unwrap();
    slp(d, &["evaluate", "--spec", "eval.toml", "--out", "results"]);
    let sinr = fs::read_to_string(d.join("results/power_vs_sinr.csv")).unwrap();
    assert_eq!(sinr.lines().count(), 1 + 2 * 4);
    assert_eq!(fs::read_to_string(d.join("results/memory.csv")).unwrap().lines().count(), 4);
}

#[test]
fn rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_slp"))
        .current_dir(dir.path())
        .args(["solve", "--data", "missing.bin", "--out", "x.csv"])
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
    fs::write(dir.path().join("junk.bin"), b"not a dataset").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_slp"))
        .current_dir(dir.path())
        .args(["train", "--data", "junk.bin", "--out", "m.slpm"])
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
}
