//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any fails.
//!
//! Runs the desk-scale experiment, so build it optimised (the workspace test
//! profile already is).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use damtl_cli::config::{resolve_threads, ExperimentConfig, Mode};
use damtl_cli::experiment::{prepare, pretrain, train_mode, Prepared};
use damtl_cli::summary::{emit_summary, RunAccuracy};
use damtl_core::alignment::cmmd_value;
use damtl_core::dataset::{
    load_csv, load_idx, split_tasks, write_csv, write_idx, LabeledSet, OverlapSpec, SplitOptions,
};
use damtl_core::gradcheck::standard_suite;
use damtl_core::network::{
    aux_forward, extract_knowledge, masked_conv_forward, task_forward, ConvSpec, ForwardOptions,
};
use damtl_core::trainer::{train_damtl, train_damtl_observed, window_relative_change, TrainConfig};
use damtl_core::{AuxModel, Graph, TaskNetwork, Tensor};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for seed in 0..3 {
        for c in standard_suite(seed).expect("suite builds") {
            worst = worst.max(c.report.max_rel_error());
            if !c.report.passed() {
                failed.push(format!("{} (seed {seed})", c.name));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && worst < 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} < 1e-4 over 8 checks x 3 seeds, {secs:.1}s; failed: {failed:?}"),
    )
}

fn random_streams(r: &mut rand_chacha::ChaCha8Rng) -> (usize, usize, Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = r.gen_range(1..16);
    let d = r.gen_range(1..6);
    let k = r.gen_range(1..5);
    let a = (0..n * d).map(|_| r.gen_range(-3.0..3.0)).collect();
    let t = (0..n * d).map(|_| r.gen_range(-3.0..3.0)).collect();
    let labels = (0..n).map(|_| r.gen_range(0..k)).collect();
    (n, d, a, t, labels)
}

fn cmmd_properties() -> Outcome {
    let mut r = rng(2024);
    let tensor = |n, d, v: &Vec<f64>| Tensor::new(vec![n, d], v.clone()).unwrap();
    let (mut identical, mut negative, mut scaling, mut brute) = (0.0f64, 0usize, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let (n, d, a, t, labels) = random_streams(&mut r);
        let v = cmmd_value(&tensor(n, d, &a), &tensor(n, d, &t), &labels).unwrap();
        if v < 0.0 {
            negative += 1;
        }
        identical = identical.max(cmmd_value(&tensor(n, d, &a), &tensor(n, d, &a), &labels).unwrap().abs());
        if i < 100 {
            brute = brute.max((v - brute_force_cmmd(&a, &t, d, &labels)).abs());
            let s: f64 = r.gen_range(-5.0..5.0);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let st: Vec<f64> = t.iter().map(|x| x * s).collect();
            let scaled = cmmd_value(&tensor(n, d, &sa), &tensor(n, d, &st), &labels).unwrap();
            if v > 0.0 {
                scaling = scaling.max((scaled - s * s * v).abs() / (s * s * v));
            }
        }
    }
    outcome(
        identical <= 1e-12 && negative == 0 && scaling <= 1e-9 && brute <= 1e-10,
        format!(
            "identical {identical:.1e} <= 1e-12, negatives {negative}/1000, t^2 rel err {scaling:.1e} <= 1e-9, brute-force abs err {brute:.1e} <= 1e-10 (100)"
        ),
    )
}

fn mask_identities() -> Outcome {
    // Ψ ≡ 1 against the plain aux forward, bit for bit
    let aux = AuxModel::init(toy_arch(), 4, 21).unwrap();
    let ds = toy_task(0, 4, 8, 21);
    let mut net = TaskNetwork::init(&aux, &ds, 3).unwrap();
    net.set_unit_masks();
    let (x, _) = ds.train.gather(&(0..8).collect::<Vec<_>>());
    let mut g = Graph::new();
    let fwd = task_forward(&mut g, &net, &aux, x.clone(), ForwardOptions::default()).unwrap();
    let mut ga = Graph::new();
    let afwd = aux_forward(&mut ga, &aux, x.clone(), false).unwrap();
    let unit = fwd
        .conv_outputs
        .iter()
        .zip(&afwd.conv_outputs)
        .chain(fwd.hidden.iter().zip(&afwd.hidden))
        .all(|(t, a)| g.value(*t).data() == ga.value(*a).data())
        && g.value(fwd.logits).shape() == [8, 4];

    // Ψ ≡ 0 with zero biases silences every conv layer
    let mut dark = net.clone();
    for m in &mut dark.masks {
        *m = Tensor::zeros(m.shape());
    }
    for c in &mut dark.convs {
        c.bias = Tensor::zeros(c.bias.shape());
    }
    let mut gz = Graph::new();
    let zf = task_forward(&mut gz, &dark, &aux, x, ForwardOptions::default()).unwrap();
    let zero = zf
        .conv_outputs
        .iter()
        .all(|c| gz.value(*c).data().iter().all(|v| *v == 0.0));

    // ∂L/∂Ψ = ∂L/∂S ⊙ W and ∂L/∂W = ∂L/∂S ⊙ Ψ
    let mut r = rng(6);
    let mut closed = 0.0f64;
    for _ in 0..10 {
        let xin = random_tensor(&[2, 2, 6, 6], &mut r, 0.0, 1.0);
        let psi_t = random_tensor(&[3, 2, 3, 3], &mut r, 0.0, 2.0);
        let w_t = random_tensor(&[3, 2, 3, 3], &mut r, -1.0, 1.0);
        let spec = ConvSpec {
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut g = Graph::new();
        let xi = g.constant(xin);
        let psi = g.param(psi_t.clone());
        let w = g.param(w_t.clone());
        let b = g.param(Tensor::full(&[3], 0.05));
        let s = extract_knowledge(&mut g, psi, w).unwrap();
        let f = masked_conv_forward(&mut g, s, xi, b, &spec).unwrap();
        let sq = g.hadamard(f, f).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let ds = g.grad(s).unwrap();
        for i in 0..psi_t.len() {
            closed = closed.max((g.grad(psi).unwrap()[i] - ds[i] * w_t.data()[i]).abs());
            closed = closed.max((g.grad(w).unwrap()[i] - ds[i] * psi_t.data()[i]).abs());
        }
    }
    outcome(
        unit && zero && closed <= 1e-10,
        format!("unit masks bitwise {unit}, zero masks silent {zero}, closed-form grad err {closed:.1e} <= 1e-10"),
    )
}

fn structural_checks() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data = damtl_cli::config::DataConfig::Synthetic {
        classes: 10,
        per_class: 60,
        side: 12,
        noise: 0.25,
    };
    cfg.pretrain.epochs = 3;
    let p = prepare(&cfg, 11).unwrap();
    let aux = pretrain(&cfg, &p, 11).unwrap().model;
    let digest = aux.digest();
    let tc = TrainConfig {
        seed: 11,
        max_epochs: 8,
        learning_rate: 0.05,
        lambda1: 5.0,
        ..TrainConfig::default()
    };
    let mut steps = 0;
    let mut min_mask = f64::INFINITY;
    let full = train_damtl_observed(&aux, &p.split.tasks, &tc, &mut |e| {
        steps += 1;
        min_mask = min_mask.min(e.net.min_mask_entry());
    })
    .unwrap();
    let rerun = train_damtl(&aux, &p.split.tasks, &tc).unwrap();
    let ablate = train_damtl(&aux, &p.split.tasks, &tc.without_alignment()).unwrap();
    let digest_ok = aux.digest() == digest;
    let bytes_ok = full.metrics_csv() == rerun.metrics_csv();
    let ablate_ok = ablate.metrics.iter().all(|m| m.cmmd == 0.0)
        && full.metrics.iter().any(|m| m.cmmd > 0.0);
    outcome(
        digest_ok && min_mask >= 0.0 && ablate_ok && bytes_ok,
        format!(
            "aux digest unchanged {digest_ok}, min mask entry over {steps} steps {min_mask:.3e} >= 0, ablate cmmd == 0 {ablate_ok}, rerun csv identical {bytes_ok}"
        ),
    )
}

struct Regime {
    name: &'static str,
    classes_per_task: usize,
    shared: usize,
}

const REGIMES: [Regime; 2] = [
    Regime {
        name: "PO",
        classes_per_task: 6,
        shared: 3,
    },
    Regime {
        name: "NO",
        classes_per_task: 5,
        shared: 0,
    },
];
const SEEDS: [u64; 3] = [0, 1, 2];

fn regime_config(r: &Regime) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.split.classes_per_task = r.classes_per_task;
    cfg.split.shared = r.shared;
    cfg.seeds = SEEDS.to_vec();
    cfg
}

struct Desk {
    outcome: Outcome,
    /// Pretrained aux and split of the PO regime, reused by the sparsity run.
    po: Vec<(u64, AuxModel, Prepared)>,
}

fn desk_experiment(threads: Option<usize>) -> Desk {
    let t = Instant::now();
    let mut po = Vec::new();
    let mut stabilised = true;
    let mut worst_change = 0.0f64;
    let mut details = Vec::new();
    let mut ok = true;
    for regime in &REGIMES {
        let cfg = regime_config(regime);
        let mut runs = Vec::new();
        for &seed in &SEEDS {
            let p = prepare(&cfg, seed).unwrap();
            let aux = pretrain(&cfg, &p, seed).unwrap().model;
            for mode in Mode::ALL {
                let out = train_mode(&cfg, &aux, &p, seed, mode, threads).unwrap();
                if mode == Mode::Full {
                    let change = window_relative_change(&out.objective, 5).unwrap_or(f64::INFINITY);
                    worst_change = worst_change.max(change);
                    stabilised &= out.objective.len() <= 100 && change < 0.01;
                }
                for task in 0..out.networks.len() {
                    runs.push(RunAccuracy {
                        seed,
                        task,
                        mode,
                        test_acc: out.final_test_accuracy(task).unwrap(),
                    });
                }
            }
            if regime.shared > 0 {
                po.push((seed, aux, p));
            }
        }
        let summary = emit_summary(&runs).unwrap();
        println!("{} regime ({} classes/task, {} shared), test accuracy % over seeds {SEEDS:?}:", regime.name, regime.classes_per_task, regime.shared);
        for line in summary.to_text().lines() {
            println!("    {line}");
        }
        let mean = |mode| {
            let v: Vec<f64> = runs.iter().filter(|r| r.mode == mode).map(|r| r.test_acc).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (full, single) = (mean(Mode::Full), mean(Mode::Single));
        let b = full >= single - 0.01;
        ok &= b;
        details.push(format!("(b) {} damtl {full:.4} vs single {single:.4}: {}", regime.name, if b { "ok" } else { "FAIL" }));
        if regime.shared > 0 {
            let acc: BTreeMap<(u64, usize, Mode), f64> =
                runs.iter().map(|r| ((r.seed, r.task, r.mode), r.test_acc)).collect();
            let pairs: Vec<bool> = acc
                .iter()
                .filter(|((_, _, m), _)| *m == Mode::Full)
                .map(|(&(s, t, _), &f)| f >= acc[&(s, t, Mode::Ablate)])
                .collect();
            let wins = pairs.iter().filter(|w| **w).count();
            let c = 2 * wins > pairs.len();
            ok &= c;
            details.push(format!("(c) PO damtl >= ablate on {wins}/{} pairs: {}", pairs.len(), if c { "ok" } else { "FAIL" }));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= stabilised && secs < 15.0 * 60.0;
    details.insert(0, format!("(a) worst final 5-epoch relative change {worst_change:.2e} < 1e-2: {}", if stabilised { "ok" } else { "FAIL" }));
    details.push(format!("{secs:.0}s < 900s"));
    Desk {
        outcome: outcome(ok, details.join("; ")),
        po,
    }
}

fn sparsity(po: &[(u64, AuxModel, Prepared)], threads: Option<usize>) -> Outcome {
    let lambdas = [0.0, 0.9, 10.0];
    let (densities, magnitudes): (Vec<f64>, Vec<f64>) = lambdas
        .iter()
        .map(|&lambda1| {
            let (mut density, mut magnitude, mut count) = (0.0, 0.0, 0);
            for (seed, aux, p) in po {
                let tc = TrainConfig {
                    lambda1,
                    max_epochs: 50,
                    tolerance: 0.0,
                    seed: *seed,
                    threads,
                    ..TrainConfig::default()
                };
                let out = train_damtl(aux, &p.split.tasks, &tc).unwrap();
                for net in &out.networks {
                    density += net.mask_density(1e-3);
                    let entries: Vec<f64> = net.masks.iter().flat_map(|m| m.data().to_vec()).collect();
                    magnitude += entries.iter().sum::<f64>() / entries.len() as f64;
                    count += 1;
                }
            }
            (density / count as f64, magnitude / count as f64)
        })
        .unzip();
    let monotone = densities.windows(2).all(|w| w[1] <= w[0]);
    // density at 1e-3 can tie; the mean mask value shows the L1 term acting
    let shrinking = magnitudes.windows(2).all(|w| w[1] < w[0]);
    outcome(
        monotone && shrinking,
        format!(
            "lambda1 {lambdas:?}: mask density (>= 1e-3) {densities:.4?} non-increasing; mean mask value {magnitudes:.4?} decreasing"
        ),
    )
}

fn data_contract() -> Outcome {
    let mut r = rng(7);
    let mut checked = 0;
    let mut violations = 0;
    while checked < 100 {
        let classes = r.gen_range(2..=12);
        let spec = OverlapSpec {
            tasks: r.gen_range(1..=4),
            classes_per_task: r.gen_range(1..=classes),
            shared: 0,
            seed: r.gen(),
        };
        let spec = OverlapSpec {
            shared: r.gen_range(0..=spec.classes_per_task),
            ..spec
        };
        if spec.validate(classes).is_err() {
            continue;
        }
        checked += 1;
        let n = classes * r.gen_range(2..=12);
        let base = LabeledSet::new(vec![0.0; n], (0..n).map(|i| i % classes).collect(), (1, 1, 1), classes).unwrap();
        let opts = SplitOptions {
            max_train: None,
            max_test: None,
            ..SplitOptions::default()
        };
        let split = split_tasks(&base, &spec, &opts).unwrap();
        let aux: std::collections::BTreeSet<usize> = split.aux.labels.iter().copied().collect();
        let mut union = std::collections::BTreeSet::new();
        for (j, t) in split.tasks.iter().enumerate() {
            let set: std::collections::BTreeSet<usize> = t.label_map.iter().copied().collect();
            let mut bad = set.len() != spec.classes_per_task || !set.is_subset(&aux);
            if j > 0 {
                let prev: std::collections::BTreeSet<usize> =
                    split.tasks[j - 1].label_map.iter().copied().collect();
                bad |= prev.intersection(&set).count() != spec.shared;
            }
            let pool = split.pool_sizes[j];
            bad |= t.train_indices.len() + t.test_indices.len() != pool;
            bad |= (t.train_indices.len() as f64 - 0.7 * pool as f64).abs() > 1.0;
            bad |= t.train_indices.iter().any(|i| t.test_indices.contains(i));
            union.extend(set);
            violations += bad as usize;
        }
        violations += (union != aux) as usize;
    }

    let dir = tempfile::tempdir().unwrap();
    let images: Vec<f64> = (0..6 * 16).map(|_| r.gen_range(0..=255u8) as f64 / 255.0).collect();
    let set = LabeledSet::new(images, vec![0, 1, 2, 3, 1, 0], (1, 4, 4), 4).unwrap();
    let (ip, lp, cp) = (dir.path().join("i"), dir.path().join("l"), dir.path().join("c.csv"));
    write_idx(&set, &ip, &lp).unwrap();
    write_csv(&set, &cp).unwrap();
    let idx_ok = load_idx(&ip, &lp).unwrap() == set;
    let csv_ok = load_csv(&cp).unwrap() == set;
    outcome(
        violations == 0 && idx_ok && csv_ok,
        format!("{checked} random specs, {violations} invariant violations; idx round-trip {idx_ok}, csv round-trip {csv_ok}"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that is not ours means another target was asked for.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let threads = resolve_threads(std::env::var("DAMTL_THREADS").ok().as_deref(), 2).unwrap();
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient correctness", gradient_correctness()),
        ("2 cmmd properties", cmmd_properties()),
        ("3 mask identities", mask_identities()),
        ("4 training structure", structural_checks()),
    ];
    let desk = desk_experiment(threads);
    let sparse = sparsity(&desk.po, threads);
    results.push(("5 desk experiment", desk.outcome));
    results.push(("6 sparsity monotonicity", sparse));
    results.push(("7 data contract", data_contract()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} — {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.passed as usize;
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
