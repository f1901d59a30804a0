use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pixact");

fn pixact(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("run pixact")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, episodes: &str, seed: &str) {
    let o = pixact(&["gen-synthetic", "--out", "raw", "--episodes", episodes, "--seed", seed], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn annotate_reports_exact_filter_rate() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "10", "7");
    let o = pixact(
        &["annotate", "--input", "raw", "--output", "out", "--backend", "synthetic", "--seed", "7", "--report", "r.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&dir.path().join("r.json"));
    assert_eq!(r["total"], 10);
    assert_eq!(r["failed"], 2);
    assert_eq!(r["filter_rate"].as_f64(), Some(0.2));
    assert_eq!(r["per_status"]["no_detection"], 2);
    assert_eq!(r["per_episode"].as_array().unwrap().len(), 10);
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn annotate_refuses_occupied_output() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "5", "1");
    std::fs::create_dir(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/keep.txt"), "x").unwrap();
    let o = pixact(&["annotate", "--input", "raw", "--output", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(std::fs::read_to_string(dir.path().join("out/keep.txt")).unwrap(), "x");
}

#[test]
fn external_backend_matches_in_process_oracle() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "8", "3");
    let a = pixact(&["annotate", "--input", "raw", "--output", "a", "--seed", "3", "--report", "a.json"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let cmd = format!("{BIN} serve-backend");
    let b = pixact(
        &[
            "annotate", "--input", "raw", "--output", "b", "--seed", "3", "--report", "b.json", "--backend", "external",
            "--backend-cmd", &cmd,
        ],
        dir.path(),
    );
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(
        std::fs::read(dir.path().join("a.json")).unwrap(),
        std::fs::read(dir.path().join("b.json")).unwrap()
    );
    for entry in std::fs::read_dir(dir.path().join("a/episodes")).unwrap() {
        let p = entry.unwrap().path();
        let other = dir.path().join("b/episodes").join(p.file_name().unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(other).unwrap());
    }
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["x", "y"] {
        let d = dir.path().join(sub);
        std::fs::create_dir(&d).unwrap();
        corpus(&d, "6", "11");
        let o = pixact(&["annotate", "--input", "raw", "--output", "ann", "--seed", "11", "--jobs", "2"], &d);
        assert!(o.status.success());
        let o = pixact(&["overlay", "--episode", "ann/episodes/ep00000.pxvl", "--step", "2", "--out", "o.png"], &d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for rel in ["raw/manifest.json", "raw/episodes/ep00003.pxvl", "ann/report.json", "ann/episodes/ep00000.pxvl", "o.png"] {
        assert_eq!(
            std::fs::read(dir.path().join("x").join(rel)).unwrap(),
            std::fs::read(dir.path().join("y").join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn overlay_tints_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let o = pixact(&["gen-synthetic", "--out", "d", "--episodes", "2", "--task", "discriminative"], dir.path());
    assert!(o.status.success());
    let o = pixact(&["overlay", "--episode", "d/episodes/dis00000.pxvl", "--out", "o.png", "--scale", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(dir.path().join("o.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (64, 64));
    // The chosen block is red, so its tinted pixels blend red with green.
    assert!(img.pixels().any(|p| p.0 == [110, 147, 20]));
}

#[test]
fn gradcheck_prints_pass_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = pixact(&["gradcheck", "--module", "pixel", "--seed", "1", "--tol", "1e-4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 3);
    assert!(out.lines().all(|l| l.starts_with("PASS pixel")));
}

#[test]
fn corrupt_episode_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("e.pxvl"), b"PXVLgarbage").unwrap();
    let o = pixact(&["inspect", "--episode", "e.pxvl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["inspect", "--bogus"], &["gradcheck", "--module", "nope"]] {
        let o = pixact(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
    }
    let o = pixact(&["frobnicate"], dir.path());
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(pixact(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn train_evaluate_infer_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = pixact(&["gen-synthetic", "--out", "data", "--episodes", "6", "--task", "discriminative", "--seed", "2"], d);
    assert!(o.status.success());
    std::fs::write(d.join("s2.cfg"), "stage=2\nsteps=3\nbatch=2\ndata=data\nout=run\nskip_stage1=true\n").unwrap();
    let o = pixact(&["train", "--config", "s2.cfg"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss"));
    assert_eq!(metrics.lines().count(), 4);
    let summary = read_json(&d.join("run/summary.json"));
    assert_eq!(summary["frozen_digest_before"], summary["frozen_digest_after"]);

    let o = pixact(&["evaluate", "--checkpoint", "run/policy.pxck", "--data", "data", "--json", "e.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = read_json(&d.join("e.json"));
    assert!(eval["mean_l1"].as_f64().unwrap() <= summary["final_loss"].as_f64().unwrap() + 1e-6);

    let args = ["infer", "--checkpoint", "run/policy.pxck", "--episode", "data/episodes/dis00000.pxvl", "--prompt", "mask", "--json"];
    let a = pixact(&args, d);
    let b = pixact(&args, d);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let chunk: Vec<Vec<f32>> = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!((chunk.len(), chunk[0].len()), (8, 7));

    std::fs::write(d.join("bad.cfg"), "stage=2\ndata=data\nout=run2\n").unwrap();
    assert_eq!(pixact(&["train", "--config", "bad.cfg"], d).status.code(), Some(1));
}
