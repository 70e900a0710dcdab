use std::path::{Path, PathBuf};
use std::process::Command;

use psm_fusion::experiment::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_psm-fusion"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> std::process::Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "psm-fusion {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::paper_default();
    cfg.dgp.n_rct = 400;
    cfg.dgp.obs_multiplier = 20;
    cfg.dgp.ground_truth_multiplier = 10;
    cfg.experiment.repetitions = 2;
    cfg.experiment.ratios = vec![1, 3];
    cfg.learner.max_epochs = 400;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

fn seeds(dir: &Path) -> std::collections::HashMap<String, String> {
    std::fs::read_to_string(dir.join("seeds.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

/// The weighted row of an `evaluate` report: (qini, mape, copc).
fn weighted_row(report: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(report).unwrap();
    let line = text.lines().find(|l| l.starts_with("weighted,")).unwrap();
    line.split(',').map(str::to_owned).collect()
}

fn runs_row(runs: &Path, rep: &str, arm: &str, ratio: &str, set: &str) -> Vec<String> {
    let text = std::fs::read_to_string(runs).unwrap();
    let prefix = format!("{rep},{arm},{ratio},{set},");
    let line = text.lines().find(|l| l.starts_with(&prefix)).unwrap();
    line.split(',').map(str::to_owned).collect()
}

#[test]
fn staged_pipeline_equals_one_shot_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let exp = dir.join("exp");
    run(&["experiment", "--config", p(&cfg), "--out-dir", p(&exp)]);

    let gen = dir.join("gen");
    run(&["generate", "--config", p(&cfg), "--repetition", "1", "--out-dir", p(&gen)]);
    let s = seeds(&gen);
    let features = "x_2,x_4,x_5,x_13,x_15,x_16";

    let fused = dir.join("fused.csv");
    run(&[
        "fuse", "--rct", p(&gen.join("train.csv")), "--obs", p(&gen.join("obs.csv")), "--ratio", "3",
        "--features", features, "--buckets", "x_0", "--out", p(&fused), "--report", p(&dir.join("cells.csv")),
    ]);
    let random = dir.join("random.csv");
    run(&[
        "fuse", "--rct", p(&gen.join("train.csv")), "--obs", p(&gen.join("obs.csv")), "--ratio", "3",
        "--random", "--seed", &s["random_fuse"], "--out", p(&random),
    ]);

    for (arm, ratio, data) in [
        ("baseline", "0", gen.join("train.csv")),
        ("fused", "3", fused.clone()),
        ("random", "3", random.clone()),
    ] {
        let model = dir.join(format!("{arm}.model"));
        run(&["train", "--data", p(&data), "--config", p(&cfg), "--seed", &s["learner"], "--out", p(&model)]);
        for (set, test) in [("ground_truth", gen.join("gt.csv")), ("biased", gen.join("test.csv"))] {
            let report = dir.join(format!("{arm}-{set}.csv"));
            run(&["evaluate", "--model", p(&model), "--data", p(&test), "--out", p(&report)]);
            let w = weighted_row(&report);
            let r = runs_row(&exp.join("runs.csv"), "1", arm, ratio, set);
            // qini, mape, copc and coverage agree exactly
            assert_eq!(&w[2..6], &r[4..8], "{arm} k={ratio} on {set}");
        }
    }
}

#[test]
fn report_and_evaluate_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let exp = dir.join("exp");
    run(&["experiment", "--config", p(&cfg), "--out-dir", p(&exp)]);
    let summary = dir.join("summary.csv");
    run(&["report", "--runs", p(&exp.join("runs.csv")), "--out", p(&summary)]);
    assert_eq!(std::fs::read(&summary).unwrap(), std::fs::read(exp.join("summary.csv")).unwrap());
    let rows = std::fs::read_to_string(&summary).unwrap().lines().count();
    // (baseline + 2 ratios x 2 arms) x 2 test sets, plus header
    assert_eq!(rows, 1 + 5 * 2);

    let gen = dir.join("gen");
    run(&["generate", "--config", p(&cfg), "--out-dir", p(&gen)]);
    let model = dir.join("m.model");
    run(&["train", "--data", p(&gen.join("rct.csv")), "--out", p(&model)]);
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    run(&["evaluate", "--model", p(&model), "--data", p(&gen.join("gt.csv")), "--out", p(&a), "--curves", p(&dir.join("c.csv"))]);
    run(&["evaluate", "--model", p(&model), "--data", p(&gen.join("gt.csv")), "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let curves = std::fs::read_to_string(dir.join("c.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 101);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    for threads in ["1", "3"] {
        let out = dir.join(format!("t{threads}"));
        run(&["--threads", threads, "experiment", "--config", p(&cfg), "--out-dir", p(&out)]);
        run(&["--threads", threads, "generate", "--config", p(&cfg), "--out-dir", p(&out.join("gen"))]);
    }
    for f in ["runs.csv", "summary.csv", "balance.csv", "gen/obs.csv", "gen/gt.csv"] {
        assert_eq!(
            std::fs::read(dir.join("t1").join(f)).unwrap(),
            std::fs::read(dir.join("t3").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn malformed_input_reports_location() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "x_0,t,y,source\n1.0,0,1,rct\n2.0,1,7,rct\n").unwrap();
    let out = bin()
        .args(["train", "--data", p(&bad), "--out", p(&tmp.path().join("m"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains('y'), "{err}");

    let out = bin()
        .args(["fuse", "--rct", p(&bad), "--obs", p(&bad), "--ratio", "0", "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn default_config_parses() {
    let out = run(&["default-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), ExperimentConfig::paper_default());
}
