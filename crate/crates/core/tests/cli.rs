//! End-to-end command contracts: exit codes, artifacts and reruns.

use std::path::{Path, PathBuf};
use std::process::Command;

use lsnb::model::{Layer, ModelSpec};
use lsnb::WeightArchive;

fn lsnb(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lsnb")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = lsnb(args);
    assert_eq!(code, 0, "{args:?}\n{stderr}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64, variant: &str) -> PathBuf {
    let out = dir.join(format!("data_{variant}_{seed}"));
    ok(&["synth-data", "--n", &n.to_string(), "--positive-fraction", "0.3", "--seed", &seed.to_string(), "--out", s(&out), "--variant", variant]);
    out
}

/// Config for 32×32 inputs; the default padding 0 suits full-resolution images only.
fn desk_config(dir: &Path) -> PathBuf {
    let path = dir.join("desk.toml");
    std::fs::write(&path, "[model.standard]\npadding = 2\n").unwrap();
    path
}

fn train(cmd: &str, data: &Path, out: &Path, seed: &str, extra: &[&str]) {
    let config = desk_config(data.parent().unwrap());
    let mut args = vec![cmd, "--config", s(&config), "--data", s(data), "--out", s(out), "--seed", seed, "--max-epochs", "1", "--learning-rate", "0.001"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn write_reports(dir: &Path, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        let run = dir.join(format!("run_{i:02}"));
        std::fs::create_dir_all(&run).unwrap();
        std::fs::write(run.join("report.json"), format!("{{\"auroc\": {v}}}")).unwrap();
    }
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(lsnb(&["--help"]).0, 0);
    let (code, stdout, _) = lsnb(&["train", "--help"]);
    assert_eq!(code, 0);
    for flag in ["--config", "--data", "--seed", "--n-runs", "--from-archive", "--overwrite"] {
        assert!(stdout.contains(flag), "{flag}");
    }
    assert_eq!(lsnb(&["no-such-command"]).0, 1);
    assert_eq!(lsnb(&["synth-data", "--n", "10", "--positive-fraction", "0.3", "--out", "/tmp/x"]).0, 1);
}

#[test]
fn synth_data_counts_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 1000, 4, "target");
    let text = std::fs::read_to_string(a.join("metadata.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1000);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",1")).count(), 300);

    let b = dir.path().join("again");
    ok(&["synth-data", "--n", "1000", "--positive-fraction", "0.3", "--seed", "4", "--out", s(&b)]);
    assert_eq!(std::fs::read(a.join("metadata.csv")).unwrap(), std::fs::read(b.join("metadata.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("images/synth_00007.png")).unwrap(), std::fs::read(b.join("images/synth_00007.png")).unwrap());
    // Non-empty output directory.
    assert_eq!(lsnb(&["synth-data", "--n", "10", "--positive-fraction", "0.3", "--seed", "4", "--out", s(&b)]).0, 1);
}

#[test]
fn train_writes_one_report_per_run_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 120, 1, "target");
    let out = dir.path().join("runs");
    train("train", &data, &out, "3", &["--n-runs", "10"]);
    for i in 0..10 {
        let run = out.join(format!("run_{i:02}"));
        for f in ["report.json", "weights.lsnbw", "epoch_log.jsonl", "run.json"] {
            assert!(run.join(f).is_file(), "{}", run.join(f).display());
        }
    }
    assert!(!out.join("run_10").exists());
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["n_runs"], 10);
    for f in ["config.toml", "spec.toml", "split.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    // Rerunning into the populated directory needs --overwrite.
    let config = desk_config(dir.path());
    let (code, _, stderr) = lsnb(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&out), "--seed", "3", "--n-runs", "2"]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("--overwrite"));
}

#[test]
fn config_file_drives_a_run_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "seed = 5\nn_runs = 2\n\n[synth]\nn = 100\npositive_fraction = 0.3\nseed = 8\n\n[data]\nheight = 16\nwidth = 16\n\n[model.standard]\npadding = 2\n\n[train]\nmax_epochs = 1\nlearning_rate = 0.001\n\n[output]\ndir = \"out\"\n",
    )
    .unwrap();
    let config = dir.path().join("exp.toml");
    ok(&["train", "--config", s(&config)]);
    assert_eq!(ModelSpec::read(&dir.path().join("out/spec.toml")).unwrap().input_shape, [3, 16, 16]);
    ok(&["train", "--config", s(&config), "--n-runs", "3", "--overwrite"]);
    assert!(dir.path().join("out/run_02/report.json").is_file());

    std::fs::write(dir.path().join("bad.toml"), "seed = 5\nunknown_key = 1\n").unwrap();
    assert_eq!(lsnb(&["train", "--config", s(&dir.path().join("bad.toml"))]).0, 1);
    std::fs::write(dir.path().join("noseed.toml"), "[synth]\nn = 100\npositive_fraction = 0.3\nseed = 8\n[output]\ndir = \"o\"\n").unwrap();
    let (code, _, stderr) = lsnb(&["train", "--config", s(&dir.path().join("noseed.toml"))]);
    assert_eq!(code, 1);
    assert!(stderr.contains("seed"));
    assert_eq!(lsnb(&["train", "--data", s(&dir.path().join("missing")), "--seed", "1", "--out", s(&dir.path().join("o"))]).0, 1);
}

#[test]
fn finetune_transfers_and_reports_mismatches_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let source = synth(dir.path(), 150, 2, "source");
    let target = synth(dir.path(), 120, 3, "target");
    let pre = dir.path().join("pre");
    train("pretrain", &source, &pre, "1", &[]);
    let archive = pre.join("pretrained.lsnbw");
    assert!(archive.is_file());

    let (code, _, stderr) = lsnb(&["finetune", "--data", s(&target), "--out", s(&dir.path().join("x")), "--seed", "1"]);
    assert_eq!(code, 1, "{stderr}");
    assert_eq!(lsnb(&["train", "--data", s(&target), "--out", s(&dir.path().join("y")), "--seed", "1", "--from-archive", s(&archive)]).0, 1);

    let (ft, sc) = (dir.path().join("ft"), dir.path().join("sc"));
    train("finetune", &target, &ft, "9", &["--from-archive", s(&archive), "--n-runs", "2"]);
    train("train", &target, &sc, "9", &["--n-runs", "2"]);
    assert_ne!(std::fs::read(ft.join("run_00/weights.lsnbw")).unwrap(), std::fs::read(sc.join("run_00/weights.lsnbw")).unwrap());
    assert_eq!(std::fs::read(ft.join("split.json")).unwrap(), std::fs::read(sc.join("split.json")).unwrap());

    // A spec whose dense layer differs from the archive's.
    let mut spec = ModelSpec::read(&ft.join("spec.toml")).unwrap();
    for layer in &mut spec.image_branch {
        if let Layer::Dense { units, .. } = layer {
            *units = 32;
        }
    }
    spec.head.in_features -= 32;
    let other = dir.path().join("other.toml");
    spec.write(&other).unwrap();
    let (code, _, stderr) = lsnb(&[
        "finetune", "--data", s(&target), "--out", s(&dir.path().join("z")), "--seed", "1", "--from-archive", s(&archive),
        "--model-spec", s(&other),
    ]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("shape mismatch for `fc_image.weight`: archive has [64,"), "{stderr}");
}

#[test]
fn evaluate_and_curves_agree_with_the_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 150, 6, "target");
    let runs = dir.path().join("runs");
    train("train", &data, &runs, "2", &["--n-runs", "2"]);
    let common = |out: &Path| {
        vec![
            "--archive".to_string(),
            s(&runs.join("run_00/weights.lsnbw")).to_string(),
            "--model-spec".into(),
            s(&runs.join("spec.toml")).into(),
            "--data".into(),
            s(&data).into(),
            "--split".into(),
            s(&runs.join("split.json")).into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let run = |cmd: &str, out: &Path| {
        let mut args = vec![cmd.to_string()];
        args.extend(common(out));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let (e1, e2) = (dir.path().join("e1.json"), dir.path().join("e2.json"));
    run("evaluate", &e1);
    run("evaluate", &e2);
    let report = std::fs::read(runs.join("run_00/report.json")).unwrap();
    assert_eq!(std::fs::read(&e1).unwrap(), report);
    assert_eq!(std::fs::read(&e2).unwrap(), report);
    let mut args = vec!["evaluate".to_string()];
    args.extend(common(&e1));
    assert_eq!(lsnb(&args.iter().map(String::as_str).collect::<Vec<_>>()).0, 1);

    let curves = dir.path().join("curves");
    run("curves", &curves);
    let pts: Vec<(f64, f64)> = std::fs::read_to_string(curves.join("roc.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (x, y) = l.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    let auroc = serde_json::from_slice::<serde_json::Value>(&report).unwrap()["auroc"].as_f64().unwrap();
    assert!((area - auroc).abs() < 1e-9, "{area} vs {auroc}");
    assert!(curves.join("pr.csv").is_file());
}

#[test]
fn attribution_of_a_black_image_is_a_zero_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 100, 7, "target");
    let runs = dir.path().join("runs");
    train("train", &data, &runs, "4", &["--n-runs", "2"]);
    image::RgbImage::new(32, 32).save(data.join("images/synth_00000.png")).unwrap();
    let out = dir.path().join("maps");
    ok(&[
        "attribute", "--archive", s(&runs.join("run_00/weights.lsnbw")), "--model-spec", s(&runs.join("spec.toml")),
        "--data", s(&data), "--out", s(&out), "--limit", "2", "--steps", "32",
    ]);
    let phi = WeightArchive::read(&out.join("synth_00000.phi.lsnbw")).unwrap();
    assert!(phi.values("phi").unwrap().iter().all(|&v| v == 0.0));
    let pgm = std::fs::read(out.join("synth_00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert!(pgm[13..].iter().all(|&p| p == 128));
    let other = WeightArchive::read(&out.join("synth_00001.phi.lsnbw")).unwrap();
    assert!(other.values("phi").unwrap().iter().any(|&v| v != 0.0));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("attribution_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert_eq!(summary[0]["output_delta"], 0.0);
}

#[test]
fn compare_annotates_significance_and_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_reports(&a, &[0.71, 0.74, 0.69, 0.73, 0.70]);
    write_reports(&b, &[0.90, 0.92, 0.91, 0.93, 0.90]);
    let (code, stdout, _) = lsnb(&["compare", "--a", s(&a), "--b", s(&b)]);
    assert_eq!(code, 0);
    let b_line = stdout.lines().find(|l| l.starts_with("b:")).unwrap();
    assert!(b_line.ends_with("**"), "{stdout}");

    let (code, stdout, _) = lsnb(&["compare", "--a", s(&a), "--b", s(&a)]);
    assert_eq!(code, 3);
    assert!(stdout.contains("p (b > a) = 0.500000"), "{stdout}");
    assert!(!stdout.contains('*'));

    assert_eq!(lsnb(&["compare", "--a", s(&a), "--b", s(&b), "--metric", "f1"]).0, 2);
    let single = dir.path().join("single");
    write_reports(&single, &[0.8]);
    assert_eq!(lsnb(&["compare", "--a", s(&single), "--b", s(&b)]).0, 2);
}

#[test]
fn search_writes_trial_log_and_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 120, 9, "target");
    let out = dir.path().join("search");
    ok(&["search", "--data", s(&data), "--seed", "1", "--out", s(&out), "--budget", "2", "--trial-epochs", "1"]);
    let log = std::fs::read_to_string(out.join("trials.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ranking: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ranking.json")).unwrap()).unwrap();
    assert_eq!(ranking.as_array().unwrap().len(), 2);
    assert_eq!(lsnb(&["search", "--data", s(&data), "--seed", "1", "--out", s(&out), "--budget", "0", "--overwrite"]).0, 1);
}
