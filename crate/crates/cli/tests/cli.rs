use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a test run
n_seed = 2
n_decoder = 2
height = 16
width = 16
boxes_per_class = 3
gt_cap = 32
batch_size = 2
steps = 4
num_scenes = 4
eval_scenes = 4
analysis_windows = 3,7
density_locations = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_localbins"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("train.lbds");
    let eval = dir.path().join("eval.lbds");
    let run_dir = dir.path().join("run");

    ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    ok(&["generate", "--config", p(&cfg), "--out", p(&eval), "--eval"]);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run_dir), "--log-every", "0"]);
    let loss = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,pixel_loss,bins_loss,total");
    assert_eq!(loss.lines().count(), 5);

    let ckpt = run_dir.join("checkpoint.lbk");
    let metrics = ok(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--data", p(&eval)]);
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "delta1,delta2,delta3,rel,rms,log10");
    assert_eq!(lines[1].split(',').count(), 6);
    assert_eq!(
        metrics,
        ok(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--data", p(&eval)])
    );

    let cov = ok(&["coverage", "--config", p(&cfg)]);
    assert_eq!(cov.lines().next().unwrap(), "mode,psci,px_covered,coverage_pct");
    assert_eq!(cov.lines().count(), 6);

    let analysis = dir.path().join("analysis");
    ok(&[
        "analyze", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--data", p(&eval), "--out", p(&analysis),
        "--locations", "10",
    ]);
    let loc = std::fs::read_to_string(analysis.join("locality.csv")).unwrap();
    assert_eq!(loc.lines().count(), 1 + 4 * 11);

    let sweep = dir.path().join("sweep");
    let out = ok(&[
        "sweep-bins", "--config", p(&cfg), "--values", "2,1", "--data", p(&data), "--eval-data", p(&eval), "--out",
        p(&sweep),
    ]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "n_bins,rel");
    assert!(rows[1].starts_with("4,") && rows[2].starts_with("8,"));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        ok(&["train", "--config", p(&cfg), "--seed", "7", "--out", p(d), "--log-every", "0"]);
    }
    ok(&["train", "--config", p(&cfg), "--seed", "8", "--out", p(&c), "--log-every", "0"]);
    let read = |d: &Path| std::fs::read(d.join("loss.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["coverage", "--seed", "x"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "no_such_key = 3\n").unwrap();
    assert_eq!(run(&["coverage", "--config", p(&bad_cfg)]).status.code(), Some(1));

    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let garbage = dir.path().join("garbage.lbds");
    std::fs::write(&garbage, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = run(&["train", "--config", p(&cfg), "--data", p(&garbage), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    // a corpus at another resolution is a data error
    let big = dir.path().join("big.cfg");
    std::fs::write(&big, TINY.replace("height = 16\nwidth = 16", "height = 32\nwidth = 32")).unwrap();
    let data = dir.path().join("big.lbds");
    ok(&["generate", "--config", p(&big), "--out", p(&data)]);
    let out = run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));

    // a checkpoint from a different bin count names the offending parameter
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run_dir), "--log-every", "0"]);
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, TINY.replace("n_seed = 2", "n_seed = 3")).unwrap();
    let out = run(&["eval", "--config", p(&other), "--checkpoint", p(&run_dir.join("checkpoint.lbk"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("head.w"));

    let missing = run(&["eval", "--config", p(&cfg), "--checkpoint", p(&dir.path().join("none.lbk"))]);
    assert_eq!(missing.status.code(), Some(2));
}
