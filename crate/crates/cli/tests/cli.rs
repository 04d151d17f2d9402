use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

struct Cfg<'a> {
    method: &'a str,
    dataset: &'a str,
    experiment: &'a str,
}

impl Default for Cfg<'_> {
    fn default() -> Self {
        Self {
            method: "ours",
            dataset: "",
            experiment: "",
        }
    }
}

fn write_config(dir: &Path, name: &str, out: &Path, cfg: &Cfg) -> PathBuf {
    let text = format!(
        r#"output_dir = "{}"

[dataset]
train_images = 2
test_images = 2
{}

[dataset.scene]
height = 8
width = 8
feature_dim = 4
num_classes = 3
num_regions = 4
noise_std = 0.3
boundary_mix_width = 1
seed = 5

[[dataset.scene.ambiguous_pairs]]
class_a = 0
class_b = 1
similarity = 0.9

[train]
steps = 30
batch_size = 2
lr = 0.05
seed = 1

[method]
name = "{}"
hidden = 4

[experiment]
seeds = [0]
{}
"#,
        out.display(),
        cfg.dataset,
        cfg.method,
        cfg.experiment
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn compseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compseg")).args(args).output().unwrap()
}

/// Runs a subcommand that must succeed and returns its run directory.
fn run_ok(args: &[&str]) -> PathBuf {
    let out = compseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root` with its bytes, sorted by relative path.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn csv_values(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn generate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tmp.path().join("runs"), &Cfg::default());
    let dir = run_ok(&["generate", "-c", s(&cfg)]);
    for split in ["train", "test"] {
        for f in ["manifest.json", "features.bin", "labels.bin"] {
            assert!(dir.join(split).join(f).is_file(), "{split}/{f}");
        }
    }
    let first = snapshot(&dir);
    assert_eq!(run_ok(&["generate", "-c", s(&cfg)]), dir);
    assert_eq!(snapshot(&dir), first);
    assert!(dir.ends_with("5"), "seed directory: {}", dir.display());
}

#[test]
fn train_exports_the_compensation_matrix() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    let ours = write_config(tmp.path(), "ours.toml", &runs, &Cfg::default());
    let dir = run_ok(&["train", "-c", s(&ours)]);
    for f in ["checkpoint.bin", "history.csv", "compensation.csv", "test_metrics.csv", "config.toml"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let text = fs::read_to_string(dir.join("compensation.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("class0"), "{text}");
    let b = csv_values(&text);
    assert_eq!(b.len(), 3);
    assert!((0..3).all(|i| b[i][i] == 0.0));
    assert!(b.iter().flatten().any(|&v| v != 0.0));

    let base = write_config(tmp.path(), "base.toml", &runs, &Cfg { method: "baseline", ..Cfg::default() });
    let dir = run_ok(&["train", "-c", s(&base)]);
    let b = csv_values(&fs::read_to_string(dir.join("compensation.csv")).unwrap());
    assert!(b.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn train_is_reproducible_and_gradcheck_runs_first() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tmp.path().join("runs"), &Cfg::default());
    let plain = run_ok(&["train", "-c", s(&cfg)]);
    let first = snapshot(&plain);
    run_ok(&["train", "-c", s(&cfg)]);
    assert_eq!(snapshot(&plain), first);

    let checked = run_ok(&["train", "-c", s(&cfg), "--gradcheck"]);
    assert_ne!(checked, plain);
    let report = fs::read_to_string(checked.join("gradcheck.txt")).unwrap();
    assert!(report.contains("max_relative_error"), "{report}");
    assert_eq!(
        fs::read(checked.join("checkpoint.bin")).unwrap(),
        fs::read(plain.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn checkpoint_subcommands() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    let gen_cfg = write_config(tmp.path(), "gen.toml", &runs, &Cfg::default());
    let data = run_ok(&["generate", "-c", s(&gen_cfg)]);
    let dataset = format!("path = \"{}\"", data.display());
    let before = snapshot(&data);

    let cfg = write_config(
        tmp.path(),
        "c.toml",
        &runs,
        &Cfg {
            dataset: &dataset,
            experiment: "ks = [3]",
            ..Cfg::default()
        },
    );
    let trained = run_ok(&["train", "-c", s(&cfg)]);
    let ck = trained.join("checkpoint.bin");

    let eval = run_ok(&["eval", "-c", s(&cfg), "--checkpoint", s(&ck)]);
    for f in ["metrics.csv", "confusion.csv", "predictions/labels.bin", "predictions/manifest.json"] {
        assert!(eval.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.contains("miou") && metrics.contains("acc_a"), "{metrics}");

    let biased = run_ok(&["bias-infer", "-c", s(&cfg), "--checkpoint", s(&ck)]);
    assert_eq!(
        fs::read(biased.join("predictions/labels.bin")).unwrap(),
        fs::read(eval.join("predictions/labels.bin")).unwrap()
    );

    let ks = run_ok(&["k-sweep", "-c", s(&cfg), "--checkpoint", s(&ck)]);
    let rows = fs::read_to_string(ks.join("k_sweep.csv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 2, "{rows}");
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[0], "3");
    assert_eq!(cells[1].parse::<f64>().unwrap(), 0.0);

    let maps = run_ok(&["uncertainty", "-c", s(&cfg), "--checkpoint", s(&ck)]);
    for kind in ["beta", "sigma2", "u", "e"] {
        let pgm = fs::read(maps.join(format!("image001/{kind}_phi1.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
    }

    let corr = run_ok(&["correction", "-c", s(&cfg), "--checkpoint", s(&ck)]);
    let auc = fs::read_to_string(corr.join("auc.csv")).unwrap();
    for r in ["e", "beta", "u", "random", "oracle"] {
        assert!(auc.lines().any(|l| l.starts_with(&format!("{r},"))), "{auc}");
    }

    assert_eq!(snapshot(&data), before, "input dataset was modified");
}

#[test]
fn experiment_suites_write_their_tables() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        &tmp.path().join("runs"),
        &Cfg {
            experiment: "noise_levels = [0, 1]\nmethods = [\"baseline\", \"ours\"]\nbnn = false",
            ..Cfg::default()
        },
    );
    let noise = run_ok(&["noise-sweep", "-c", s(&cfg)]);
    let summary = fs::read_to_string(noise.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2, "{summary}");

    let mem = run_ok(&["memorization", "-c", s(&cfg)]);
    let rows = fs::read_to_string(mem.join("memorization.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4, "{rows}");

    let corr = run_ok(&["correction", "-c", s(&cfg)]);
    assert!(corr.join("curves.csv").is_file());
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");

    assert_eq!(compseg(&["train"]).status.code(), Some(1));
    assert_eq!(compseg(&["train", "-c", "/nonexistent/config.toml"]).status.code(), Some(1));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "output_dir = \"x\"\nunknown_key = 1\n").unwrap();
    assert_eq!(compseg(&["generate", "-c", s(&bad)]).status.code(), Some(1));

    let unknown = write_config(tmp.path(), "m.toml", &runs, &Cfg { method: "nope", ..Cfg::default() });
    assert_eq!(compseg(&["train", "-c", s(&unknown)]).status.code(), Some(1));

    let missing = write_config(
        tmp.path(),
        "d.toml",
        &runs,
        &Cfg {
            dataset: "path = \"/nonexistent/dataset\"",
            ..Cfg::default()
        },
    );
    let out = compseg(&["train", "-c", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let cfg = write_config(tmp.path(), "c.toml", &runs, &Cfg::default());
    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        compseg(&["eval", "-c", s(&cfg), "--checkpoint", s(&junk)]).status.code(),
        Some(2)
    );
}

#[test]
fn unwritable_output_leaves_nothing_behind() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"a file where a directory is expected").unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &blocker.join("runs"), &Cfg::default());
    let out = compseg(&["generate", "-c", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read(&blocker).unwrap(), b"a file where a directory is expected");
    let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}
