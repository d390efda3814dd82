use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4
dataset.kind = "synthetic"
dataset.per_cluster = 30
dataset.dim = 4
dataset.separation = 10.0
dataset.test_fraction = 0.25
dataset.standardize = true
partition.kind = "interleaved"
head.n_p = 2
head.k = 2
model.hidden = [16]
gar.c_alpha = 0.1
gar.c_beta = 0.1
gar.c_f = 0.0003
train.batch_size = 16
train.epochs = 5
train.lr = 0.03
train.momentum = 0.9
train.validation_size = 10
"#;

fn acol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acol"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in `{line}`"))
}

#[test]
fn train_writes_artifacts_and_eval_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let line = stdout(&acol(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]));
    for f in ["checkpoint.bin", "metrics.csv", "embeddings.csv", "summary.toml", "config.toml"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.starts_with("epoch,sup_loss,affinity,balance,frobenius,"));
    let embeddings = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    assert!(embeddings.starts_with("z1,z2,z3,z4,assigned,parent,sub,truth\n"));
    assert_eq!(embeddings.lines().count(), 1 + 30);

    let eval = stdout(&acol(&["eval", "--config", &cfg, "--checkpoint", out.to_str().unwrap()]));
    assert_eq!(field(&line, "acc"), field(&eval, "acc"));
    assert_eq!(field(&line, "parent_acc"), field(&eval, "parent_acc"));
}

#[test]
fn seed_override_changes_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        stdout(&acol(&[
            "train", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap(), "--quiet",
        ]));
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run("1", "a");
    let b = run("1", "b");
    let c = run("2", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn random_partition_scenarios_report_rows_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "dataset.clusters = 4\nscenario.mode = \"random-partitions\"\nscenario.count = 4\n",
    );
    let out = tmp.path().join("sweep");
    let text = stdout(&acol(&["scenarios", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]));
    let rows = fs::read_to_string(out.join("scenarios.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    let agg = fs::read_to_string(out.join("scenarios_aggregate.csv")).unwrap();
    assert_eq!(agg.lines().next().unwrap(), "method,worst,median,best,mean,std");
    assert_eq!(agg.lines().count(), 3);
    assert!(text.contains("acol,"));
}

#[test]
fn export_graph_and_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    stdout(&acol(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]));
    let graph = tmp.path().join("g.txt");
    let line = stdout(&acol(&[
        "export-graph", "--config", &cfg, "--checkpoint", out.to_str().unwrap(), "--out",
        graph.to_str().unwrap(), "--which", "y", "--limit", "20",
    ]));
    let edges: usize = field(&line, "edges").parse().unwrap();
    let text = fs::read_to_string(&graph).unwrap();
    let data_lines = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(data_lines, edges);
    assert_eq!(text.lines().filter(|l| l.starts_with("# v ")).count(), 20);

    let base = stdout(&acol(&["baseline", "--config", &cfg]));
    let acc: f64 = field(&base, "baseline_acc").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn bad_inputs_fail_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bogus_key = 1\n");
    let o = acol(&["train", "--config", &cfg, "--quiet"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let o = acol(&["eval", "--config", &cfg, "--checkpoint", "/nonexistent/checkpoint.bin"]);
    assert!(!o.status.success());

    let o = acol(&["train"]);
    assert!(!o.status.success());
}

#[test]
fn eval_rejects_mismatched_head() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    stdout(&acol(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]));
    let other = tmp.path().join("other.toml");
    fs::write(&other, TINY.replace("head.k = 2", "head.k = 3")).unwrap();
    let o = acol(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("head"));
}
