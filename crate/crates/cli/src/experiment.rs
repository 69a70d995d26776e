//! Command implementations. Every command is a pure function of the config,
//! the seed list and the files already in the output directory.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use damtl_core::checkpoint::{encode_aux, encode_task, load_aux, load_task};
use damtl_core::dataset::split_tasks;
use damtl_core::gradcheck::{standard_suite, SUITE_TOLERANCE};
use damtl_core::trainer::{evaluate, pretrain_aux, train_damtl, PretrainOutcome, TrainOutcome};
use damtl_core::{Architecture, AuxModel, TaskNetwork, TaskSplit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig, Mode};
use crate::error::{CliError, Result};
use crate::output::{write_atomic, write_json, RunRecord};
use crate::summary::{emit_summary, RunAccuracy, Summary};

/// File names under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }
    pub fn split(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("split.json")
    }
    pub fn aux(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("aux.ckpt")
    }
    pub fn aux_key(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("aux.json")
    }
    pub fn pretrain_curve(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("pretrain.csv")
    }
    pub fn metrics(&self, seed: u64, mode: Mode) -> PathBuf {
        self.seed_dir(seed).join(format!("metrics-{}.csv", mode.tag()))
    }
    pub fn task(&self, seed: u64, mode: Mode, task: usize) -> PathBuf {
        self.seed_dir(seed).join(format!("task{task}-{}.ckpt", mode.tag()))
    }
    pub fn run_record(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn summary_csv(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
    pub fn summary_text(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
    pub fn gradcheck(&self) -> PathBuf {
        self.root.join("gradcheck.txt")
    }
}

/// Corpus, task split and architecture for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: TaskSplit,
    pub arch: Architecture,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let corpus = cfg.load_corpus(seed)?;
    let split = split_tasks(&corpus, &cfg.split.overlap(seed), &cfg.split.options())?;
    let arch = cfg.arch.for_input(corpus.image_shape());
    arch.validate()?;
    Ok(Prepared { split, arch })
}

pub fn pretrain(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<PretrainOutcome> {
    Ok(pretrain_aux(
        &prepared.split.aux,
        prepared.arch.clone(),
        &cfg.pretrain,
        seed,
    )?)
}

/// Trains all tasks of one seed in one mode against a fixed aux model.
pub fn train_mode(
    cfg: &ExperimentConfig,
    aux: &AuxModel,
    prepared: &Prepared,
    seed: u64,
    mode: Mode,
    threads: Option<usize>,
) -> Result<TrainOutcome> {
    let mut tc = mode.apply(&cfg.train);
    tc.seed = seed;
    tc.threads = threads;
    Ok(train_damtl(aux, &prepared.split.tasks, &tc)?)
}

/// Identifies everything the aux model depends on.
fn aux_key(cfg: &ExperimentConfig, seed: u64) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        data: &'a crate::config::DataConfig,
        split: &'a crate::config::SplitConfig,
        arch: &'a crate::config::ArchConfig,
        pretrain: &'a damtl_core::trainer::PretrainConfig,
        seed: u64,
    }
    let json = serde_json::to_vec(&Key {
        data: &cfg.data,
        split: &cfg.split,
        arch: &cfg.arch,
        pretrain: &cfg.pretrain,
        seed,
    })
    .expect("key serialises");
    hex(&Sha256::digest(json))
}

#[derive(Serialize, Deserialize)]
struct AuxMeta {
    key: String,
    classes: usize,
    epochs: usize,
    train_accuracy: f64,
}

fn save_aux(cfg: &ExperimentConfig, layout: &Layout, seed: u64, out: &PretrainOutcome) -> Result<()> {
    write_atomic(&layout.aux(seed), &encode_aux(&out.model))?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in out.losses.iter().enumerate() {
        let _ = writeln!(curve, "{e},{l:.9}");
    }
    write_atomic(&layout.pretrain_curve(seed), curve.as_bytes())?;
    write_json(
        &layout.aux_key(seed),
        &AuxMeta {
            key: aux_key(cfg, seed),
            classes: out.model.num_classes(),
            epochs: out.losses.len(),
            train_accuracy: out.train_accuracy,
        },
    )
}

/// Reuses a stored aux model when it was built from the same inputs,
/// otherwise pretrains (and stores) a fresh one.
pub fn obtain_aux(
    cfg: &ExperimentConfig,
    layout: &Layout,
    prepared: &Prepared,
    seed: u64,
    log: &mut dyn Write,
) -> Result<AuxModel> {
    let stored = std::fs::read(layout.aux_key(seed))
        .ok()
        .and_then(|b| serde_json::from_slice::<AuxMeta>(&b).ok());
    if stored.is_some_and(|m| m.key == aux_key(cfg, seed)) && layout.aux(seed).exists() {
        let aux = load_aux(&layout.aux(seed))?;
        if aux.arch == prepared.arch {
            let _ = writeln!(log, "seed {seed}: reusing {}", layout.aux(seed).display());
            return Ok(aux);
        }
    }
    let out = pretrain(cfg, prepared, seed)?;
    let _ = writeln!(
        log,
        "seed {seed}: pretrained aux on {} classes, {} epochs, train acc {:.4}",
        out.model.num_classes(),
        out.losses.len(),
        out.train_accuracy
    );
    save_aux(cfg, layout, seed, &out)?;
    Ok(out.model)
}

fn record(cfg: &ExperimentConfig, layout: &Layout, command: &str) -> Result<()> {
    write_json(&layout.run_record(), &RunRecord::new(command, cfg))
}

pub fn cmd_split(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed)?;
        write_json(&layout.split(seed), p.split.manifest())?;
        let counts: Vec<String> = p
            .split
            .tasks
            .iter()
            .map(|t| format!("T{}: {:?} {}/{}", t.task_id + 1, t.label_map, t.train.len(), t.test.len()))
            .collect();
        let _ = writeln!(log, "seed {seed}: aux {} samples; {}", p.split.aux.len(), counts.join("; "));
    }
    record(cfg, &layout, "split")
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed)?;
        write_json(&layout.split(seed), p.split.manifest())?;
        let out = pretrain(cfg, &p, seed)?;
        let _ = writeln!(
            log,
            "seed {seed}: pretrained aux on {} classes, {} epochs, train acc {:.4}",
            out.model.num_classes(),
            out.losses.len(),
            out.train_accuracy
        );
        save_aux(cfg, &layout, seed, &out)?;
    }
    record(cfg, &layout, "pretrain")
}

/// `train` (config mode) and `ablate` (forced alignment-free mode).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    mode: Mode,
    threads: Option<usize>,
    log: &mut dyn Write,
) -> Result<Summary> {
    let layout = Layout::new(&cfg.out_dir);
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed)?;
        write_json(&layout.split(seed), p.split.manifest())?;
        let aux = obtain_aux(cfg, &layout, &p, seed, log)?;
        let out = train_mode(cfg, &aux, &p, seed, mode, threads)?;
        write_atomic(&layout.metrics(seed, mode), out.metrics_csv().as_bytes())?;
        for net in &out.networks {
            write_atomic(&layout.task(seed, mode, net.task_id), &encode_task(net))?;
        }
        let accs: Vec<String> = (0..out.networks.len())
            .map(|j| format!("T{} {:.4}", j + 1, out.final_test_accuracy(j).unwrap_or(f64::NAN)))
            .collect();
        let _ = writeln!(
            log,
            "seed {seed} [{}]: {} epochs{}; test acc {}",
            mode.tag(),
            out.objective.len(),
            if out.converged { " (converged)" } else { "" },
            accs.join(", ")
        );
    }
    record(cfg, &layout, if mode == Mode::Ablate { "ablate" } else { "train" })?;
    let summary = emit_summary(&collect_runs(cfg, &layout)?)?;
    write_summary(&layout, &summary)?;
    let _ = write!(log, "{}", summary.to_text());
    Ok(summary)
}

fn write_summary(layout: &Layout, summary: &Summary) -> Result<()> {
    write_atomic(&layout.summary_csv(), summary.to_csv().as_bytes())?;
    write_atomic(&layout.summary_text(), summary.to_text().as_bytes())
}

/// Final-epoch test accuracy per task from a metrics CSV.
pub fn final_accuracies(csv: &str) -> Result<Vec<(usize, f64)>> {
    let bad = |m: &str| CliError::Data(format!("malformed metrics csv: {m}"));
    let mut last: Vec<(usize, usize, f64)> = Vec::new();
    for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(bad(line));
        }
        let epoch: usize = cols[0].parse().map_err(|_| bad(line))?;
        let task: usize = cols[1].parse().map_err(|_| bad(line))?;
        let acc: f64 = cols[7].parse().map_err(|_| bad(line))?;
        match last.iter_mut().find(|(t, _, _)| *t == task) {
            Some(slot) if epoch >= slot.1 => *slot = (task, epoch, acc),
            Some(_) => {}
            None => last.push((task, epoch, acc)),
        }
    }
    last.sort_by_key(|(t, _, _)| *t);
    Ok(last.into_iter().map(|(t, _, a)| (t, a)).collect())
}

/// Every (seed, mode) in the config with a metrics file on disk.
pub fn collect_runs(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<RunAccuracy>> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for mode in Mode::ALL {
            let path = layout.metrics(seed, mode);
            let Ok(text) = std::fs::read_to_string(&path) else {
                continue;
            };
            for (task, test_acc) in final_accuracies(&text)? {
                runs.push(RunAccuracy {
                    seed,
                    task,
                    mode,
                    test_acc,
                });
            }
        }
    }
    Ok(runs)
}

fn load_task_checked(path: &Path, prepared: &Prepared, task: usize) -> Result<TaskNetwork> {
    let net = load_task(path)?;
    let expect = &prepared.split.tasks[task];
    if net.label_map != expect.label_map || net.arch != prepared.arch {
        return Err(CliError::Data(format!(
            "{} was trained on a different split or architecture",
            path.display()
        )));
    }
    Ok(net)
}

/// Re-evaluates stored task checkpoints on the test split of every seed.
pub fn cmd_eval(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Summary> {
    let layout = Layout::new(&cfg.out_dir);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed)?;
        let aux_path = layout.aux(seed);
        if !aux_path.exists() {
            return Err(CliError::Data(format!("missing {}", aux_path.display())));
        }
        let aux = load_aux(&aux_path)?;
        for mode in Mode::ALL {
            let paths: Vec<PathBuf> = (0..p.split.tasks.len())
                .map(|j| layout.task(seed, mode, j))
                .collect();
            if !paths.iter().all(|q| q.exists()) {
                continue;
            }
            for (j, path) in paths.iter().enumerate() {
                let net = load_task_checked(path, &p, j)?;
                let test_acc = evaluate(&net, &aux, &p.split.tasks[j].test)?;
                runs.push(RunAccuracy {
                    seed,
                    task: j,
                    mode,
                    test_acc,
                });
            }
        }
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!(
            "no task checkpoints under {}",
            layout.root.display()
        )));
    }
    let mut csv = String::from("seed,task,mode,test_acc\n");
    for r in &runs {
        let _ = writeln!(csv, "{},{},{},{:.6}", r.seed, r.task, r.mode.tag(), r.test_acc);
    }
    write_atomic(&layout.eval(), csv.as_bytes())?;
    let summary = emit_summary(&runs)?;
    write_summary(&layout, &summary)?;
    record(cfg, &layout, "eval")?;
    let _ = write!(log, "{}", summary.to_text());
    Ok(summary)
}

/// Finite-difference check of every op and of the full task loss. Uses the
/// first configured seed for the random inputs.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let checks = standard_suite(cfg.seeds[0])?;
    let mut report = format!("{:<40}  {:>12}  {}\n", "check", "max rel err", "result");
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.report.passed();
        if !ok {
            failed.push(c.name);
        }
        let _ = writeln!(
            report,
            "{:<40}  {:>12.3e}  {}",
            c.name,
            c.report.max_rel_error(),
            if ok { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(report, "tolerance {SUITE_TOLERANCE:e}");
    write_atomic(&layout.gradcheck(), report.as_bytes())?;
    record(cfg, &layout, "gradcheck")?;
    let _ = write!(log, "{report}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
