use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setnet::analysis::CriticalSetReport;
use setnet::data::read_cloud_file;

const TINY: &str = "\
task = classify
seed = 3
data.points = 48
data.per_class = 6
train.epochs = 1
train.batch_size = 8
model.input_transform = false
model.feature_transform = false
model.pre_widths = 8,8
model.post_widths = 16
model.k = 24
model.fc_widths = 16,8
";

fn setnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny classifier into `dir/run` and returns the checkpoint path.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, TINY);
    let run = dir.join("run");
    let o = setnet(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    run.join("checkpoint.pnet")
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(setnet(&["--help"]).status.code(), Some(0));
    assert_eq!(setnet(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(setnet(&[]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = setnet(&["train", "--config", s(&cfg), "--set", "model.nonsense=1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.nonsense"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = setnet(&[
        "analyze",
        "grid",
        "--checkpoint",
        s(&dir.path().join("absent.pnet")),
        "--dim",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn train_writes_artifacts_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    for f in ["config.txt", "checkpoint.pnet", "metrics.txt", "train.log"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let echoed = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("model.k = 24"));
    assert!(echoed.contains("seed = 3"));
    let metrics = std::fs::read_to_string(run.join("metrics.txt")).unwrap();
    assert!(metrics.contains("accuracy"), "{metrics}");
}

#[test]
fn analysis_verbs_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), TINY);
    let o = setnet(&["data", "synth", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut test: Vec<PathBuf> = std::fs::read_dir(data.join("test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    test.sort();
    let (a, b) = (&test[0], &test[1]);
    let out = dir.path().join("analysis");

    let o = setnet(&[
        "analyze", "critical", "--checkpoint", s(&ckpt), "--cloud", s(a), "--resolution", "6", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = CriticalSetReport::parse(&std::fs::read_to_string(out.join("critical.txt")).unwrap()).unwrap();
    assert!(!report.critical_indices.is_empty());
    assert!(report.critical_indices.len() <= report.k);
    assert!(report.checks.iter().all(|(_, ok)| *ok), "{:?}", report.checks);

    let o = setnet(&[
        "analyze", "upperbound", "--checkpoint", s(&ckpt), "--cloud", s(a), "--resolution", "6", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read_cloud_file(out.join("upperbound.txt")).unwrap().len() >= report.critical_indices.len());

    let o = setnet(&["analyze", "grid", "--checkpoint", s(&ckpt), "--dim", "2", "--resolution", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = std::fs::read_to_string(out.join("grid_2.txt")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 125);

    let o = setnet(&[
        "analyze", "retrieve", "--checkpoint", s(&ckpt), "--cloud", s(a), "--gallery", s(&data.join("test")), "--k",
        "3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hits = std::fs::read_to_string(out.join("retrieval.txt")).unwrap();
    assert_eq!(hits.lines().count(), 4);
    // The query is part of the gallery, so it is its own nearest neighbour.
    let own = read_cloud_file(a).unwrap().id;
    assert!(hits.lines().nth(1).unwrap().starts_with(&format!("1 {own} ")), "{hits}");

    let o = setnet(&["analyze", "correspond", "--checkpoint", s(&ckpt), "--cloud", s(a), "--other", s(b), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pairs = std::fs::read_to_string(out.join("correspondence.txt")).unwrap();
    assert!(pairs.lines().count() > 1);

    let o = setnet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics.txt").is_file());
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = setnet(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["checkpoint.pnet", "metrics.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}
