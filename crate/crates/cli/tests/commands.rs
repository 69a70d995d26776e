use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [4]

[data]
source = "synthetic"
classes = 6
per_class = 20
side = 6

[split]
tasks = 2
classes_per_task = 3
shared = 1

[arch]
convs = [{ out_channels = 3, kernel = 3, stride = 1, padding = 0 }]
hidden = [8, 6]

[train]
learning_rate = 0.05
alpha = [1.0]
batch_size = 64
max_epochs = 3
tolerance = 0.0

[pretrain]
epochs = 2
batch_size = 16
"#;

fn damtl(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_damtl"));
    cmd.current_dir(dir).args(args).env_remove("DAMTL_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = damtl(dir.path(), &["gradcheck", "--out", "gc"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("gc/gradcheck.txt")).unwrap();
    assert!(report.contains("task loss"));
    assert!(!report.contains("FAIL"));
    assert_eq!(report.lines().filter(|l| l.ends_with("pass")).count(), 8);
}

#[test]
fn config_errors_exit_one() {
    let dir = setup("[train]\nlearnig_rate = 0.1\n");
    assert_eq!(code(&damtl(dir.path(), &["train", "--config", "exp.toml"], &[])), 1);
    assert_eq!(code(&damtl(dir.path(), &["train"], &[])), 1);
    assert_eq!(code(&damtl(dir.path(), &["train", "--config", "nope.toml"], &[])), 1);
    assert_eq!(code(&damtl(dir.path(), &["frobnicate"], &[])), 1);

    let infeasible = setup("[split]\nclasses_per_task = 6\nshared = 0\n");
    let o = damtl(infeasible.path(), &["split", "--config", "exp.toml"], &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("infeasible"));

    let ok = setup(TINY);
    let o = damtl(ok.path(), &["train", "--config", "exp.toml"], &[("DAMTL_THREADS", "zero")]);
    assert_eq!(code(&o), 1);
    // nothing ran, nothing written
    assert!(!ok.path().join("runs").exists());
}

#[test]
fn data_errors_exit_two() {
    let dir = setup("[data]\nsource = \"csv\"\npath = \"missing.csv\"\n");
    assert_eq!(code(&damtl(dir.path(), &["split", "--config", "exp.toml"], &[])), 2);

    let bad = setup("[data]\nsource = \"csv\"\npath = \"d.csv\"\n");
    fs::write(bad.path().join("d.csv"), "label,px0,px1,px2,px3\n0,1,2\n").unwrap();
    assert_eq!(code(&damtl(bad.path(), &["split", "--config", "exp.toml"], &[])), 2);

    let tiny = setup(TINY);
    let o = damtl(tiny.path(), &["eval", "--config", "exp.toml"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn split_writes_manifest_and_provenance() {
    let dir = setup(TINY);
    let o = damtl(dir.path(), &["split", "--config", "exp.toml", "--seed", "9", "--out", "s"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("s/seed-9/split.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["tasks"].as_array().unwrap().len(), 2);
    let run: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("s/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "split");
    assert_eq!(run["seeds"], serde_json::json!([9]));
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(run["config"]["split"]["shared"], 1);
}

#[test]
fn train_is_byte_deterministic_across_reruns_and_thread_counts() {
    let dir = setup(TINY);
    let metrics = dir.path().join("runs/seed-4/metrics-full.csv");
    let o = damtl(dir.path(), &["train", "--config", "exp.toml"], &[("DAMTL_THREADS", "1")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = fs::read(&metrics).unwrap();
    let ckpt = fs::read(dir.path().join("runs/seed-4/task1-full.ckpt")).unwrap();

    let o = damtl(dir.path(), &["train", "--config", "exp.toml"], &[("DAMTL_THREADS", "2")]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("reusing"));
    assert_eq!(fs::read(&metrics).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("runs/seed-4/task1-full.ckpt")).unwrap(), ckpt);

    // a fresh directory (fresh pretraining) gives the same bytes too
    let other = setup(TINY);
    assert_eq!(code(&damtl(other.path(), &["train", "--config", "exp.toml"], &[])), 0);
    assert_eq!(fs::read(other.path().join("runs/seed-4/metrics-full.csv")).unwrap(), first);
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn ablate_differs_from_train_only_through_alignment() {
    let dir = setup(TINY);
    assert_eq!(code(&damtl(dir.path(), &["pretrain", "--config", "exp.toml"], &[])), 0);
    assert_eq!(code(&damtl(dir.path(), &["train", "--config", "exp.toml"], &[])), 0);
    assert_eq!(code(&damtl(dir.path(), &["ablate", "--config", "exp.toml"], &[])), 0);
    let full = rows(&dir.path().join("runs/seed-4/metrics-full.csv"));
    let abl = rows(&dir.path().join("runs/seed-4/metrics-ablate.csv"));
    assert_eq!(full.len(), abl.len());
    for (f, a) in full.iter().zip(&abl) {
        assert_eq!(f[..2], a[..2], "same (epoch, task) rows");
        assert_eq!(a[4], 0.0, "ablate cmmd column is identically zero");
        assert!((a[5] - (a[2] + 0.9 * a[3])).abs() < 1e-6);
    }
    // One batch per epoch and task FC weights start as copies of the aux
    // weights: the first step sees identical parameters and zero discrepancy,
    // so the epoch-0 rows coincide; afterwards the totals diverge.
    for t in 0..2 {
        assert_eq!(full[t][..7], abl[t][..7]);
    }
    for (f, a) in full[2..].iter().zip(&abl[2..]) {
        assert!(f[4] > 0.0);
        assert_ne!(f[5], a[5]);
    }

    let summary = fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap();
    assert!(summary.contains(",full,") && summary.contains(",ablate,"));
    let text = fs::read_to_string(dir.path().join("runs/summary.txt")).unwrap();
    assert!(text.lines().next().unwrap().contains("ablate"));
}

#[test]
fn eval_reproduces_final_test_accuracy() {
    let dir = setup(TINY);
    assert_eq!(code(&damtl(dir.path(), &["train", "--config", "exp.toml"], &[])), 0);
    let o = damtl(dir.path(), &["eval", "--config", "exp.toml"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("runs/seed-4/metrics-full.csv")).unwrap();
    let finals = damtl_cli::experiment::final_accuracies(&metrics).unwrap();
    let eval = fs::read_to_string(dir.path().join("runs/eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().skip(1).collect();
    assert_eq!(lines.len(), 2);
    for (line, (task, acc)) in lines.iter().zip(finals) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "4");
        assert_eq!(cols[1].parse::<usize>().unwrap(), task);
        assert_eq!(cols[2], "full");
        assert!((cols[3].parse::<f64>().unwrap() - acc).abs() < 1e-6);
    }
}

#[test]
fn idx_corpus_runs_end_to_end() {
    use damtl_core::dataset::{synthetic_glyphs, write_idx, SyntheticSpec};
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic_glyphs(&SyntheticSpec {
        classes: 6,
        per_class: 20,
        side: 6,
        noise: 0.1,
        seed: 1,
    });
    // IDX stores bytes, so quantise the way the loader will see it
    write_idx(&set, &dir.path().join("img.idx"), &dir.path().join("lab.idx")).unwrap();
    let cfg = TINY.replace(
        "source = \"synthetic\"\nclasses = 6\nper_class = 20\nside = 6",
        "source = \"idx\"\nimages = \"img.idx\"\nlabels = \"lab.idx\"",
    );
    fs::write(dir.path().join("exp.toml"), cfg).unwrap();
    let o = damtl(dir.path(), &["train", "--config", "exp.toml"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("runs/seed-4/aux.ckpt").exists());
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk-po.toml", "desk-no.toml"] {
        let cfg = damtl_cli::ExperimentConfig::load(&root.join(name)).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
    }
    // the IDX template parses but points at files that are not shipped
    let text = fs::read_to_string(root.join("idx.toml")).unwrap();
    assert!(damtl_cli::ExperimentConfig::parse(&text).is_ok());
}
