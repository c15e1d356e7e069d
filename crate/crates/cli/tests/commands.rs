use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use metreg::field::io::read_vector_raw;
use metreg::field::VectorField;

fn metreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metreg"))
        .args(args)
        .env_remove("MREG_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = metreg(args);
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

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const FAST: &str = "[optimizer]\nepochs_global = 1\nepochs_local = 1\ninner_steps = 2\ntest_iters_global = 10\ntest_iters_local = 10\n";

#[test]
fn synth_gen_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-gen", "--out", p(d), "--n", "1", "--seed", "7", "--size", "64"]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(n, _)| n.ends_with("gt_map.bin")));
    assert_eq!(ta, tb);
}

#[test]
fn evaluate_truth_against_itself_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let report = tmp.path().join("report");
    ok(&["synth-gen", "--out", p(&corpus), "--n", "2", "--seed", "3", "--size", "64"]);
    ok(&["evaluate", "--runs", p(&corpus), "--truth", p(&corpus), "--out", p(&report)]);
    let csv = fs::read_to_string(report.join("displacement_error.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "case,region,median,q1,q3,mean,count");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        for v in &f[2..6] {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{row}");
        }
        assert!(f[6].parse::<usize>().unwrap() > 0);
    }
    for name in ["jacobian.csv", "stddev.csv", "config.txt", "case_0000_stddev.pgm", "case_0001_w3.pgm"] {
        assert!(report.join(name).is_file(), "{name}");
    }
}

fn energy_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_then_register() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let model = tmp.path().join("model");
    let cfg = tmp.path().join("fast.toml");
    fs::write(&cfg, FAST).unwrap();
    ok(&["synth-gen", "--out", p(&corpus), "--n", "2", "--seed", "5", "--size", "64"]);
    ok(&["train", "--corpus", p(&corpus), "--out", p(&model), "--config", p(&cfg)]);
    for name in ["theta.bin", "task_0.bin", "task_1.bin", "log.csv", "config.txt"] {
        assert!(model.join(name).is_file(), "{name}");
    }
    let log = fs::read_to_string(model.join("log.csv")).unwrap();
    assert!(log.starts_with("# config_hash="));
    assert_eq!(log.lines().count(), 4);

    let case = corpus.join("case_0000");
    let theta = model.join("theta.bin");
    let same = tmp.path().join("same");
    ok(&[
        "register", "--theta", p(&theta), "--source", p(&case.join("source.bin")), "--target",
        p(&case.join("source.bin")), "--out", p(&same), "--config", p(&cfg),
    ]);
    let rows = energy_rows(&fs::read_to_string(same.join("energy.csv")).unwrap());
    let sim = |r: &Vec<String>| r[4].parse::<f64>().unwrap();
    let last = rows.iter().find(|r| r[0] == "final_local").unwrap();
    assert!(sim(last) <= sim(&rows[0]) + 1e-12);
    let phi = read_vector_raw(same.join("phi_inv.bin")).unwrap();
    let id = VectorField::identity(phi.grid);
    assert!(phi.max_abs_diff(&id) * 64.0 < 1e-3);

    let pair = tmp.path().join("pair");
    ok(&[
        "register", "--theta", p(&theta), "--source", p(&case.join("source.bin")), "--target",
        p(&case.join("target.bin")), "--out", p(&pair), "--config", p(&cfg),
    ]);
    let rows = energy_rows(&fs::read_to_string(pair.join("energy.csv")).unwrap());
    let last = rows.iter().find(|r| r[0] == "final_local").unwrap();
    assert!(sim(last) < sim(&rows[0]));
    for name in ["warped.pgm", "stddev.pgm", "weights_0.pgm", "phi_inv_global.bin"] {
        assert!(pair.join(name).is_file(), "{name}");
    }
}

#[test]
fn error_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[optimizer]\nlr_indvidual = 1.0\n").unwrap();
    let out = metreg(&["gradcheck", "--size", "4"]);
    assert!(out.status.success());
    let out = metreg(&["synth-gen", "--out", p(tmp.path()), "--n", "1", "--seed", "1", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("MREG-E2 config:"));
    let out = metreg(&["train", "--corpus", p(&tmp.path().join("missing")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("MREG-E4 io:"));
    let out = Command::new(env!("CARGO_BIN_EXE_metreg"))
        .args(["synth-gen", "--out", p(tmp.path()), "--n", "1", "--seed", "1"])
        .env("MREG_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(metreg(&["frobnicate"]).status.code(), Some(2));
}
