//! Losses, projected SGD, auxiliary pretraining and the joint training loop.
//!
//! Per task and batch the objective is
//! `CE (summed over the batch) + λ1 Σ_l ‖Ψ_l‖₁ + λ2 Σ_h CMMD_h`, and the joint
//! objective of one round is `Σ_j α_j · L_j`. No trainable parameter is shared
//! between tasks, so each task is stepped on its own `α_j · L_j`; the joint
//! gradient is identical.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::alignment_total;
use crate::dataset::{batches, DataError, LabeledSet, TaskDataset};
use crate::network::{
    aux_forward, argmax_rows, task_forward, Architecture, AuxModel, ForwardOptions, LayerIds,
    NetworkError, TaskForward, TaskNetwork, TaskParamIds,
};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the mask L1 term.
    pub lambda1: f64,
    /// Weight of the alignment term.
    pub lambda2: f64,
    /// Per-task weights in the joint objective; a single value applies to all tasks.
    pub alpha: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs whose relative objective change must stay below `tolerance`.
    pub convergence_window: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Keep every mask at exactly 1 and never update it.
    pub fixed_masks: bool,
    /// Write wall-clock seconds into the metrics (breaks byte-identical reruns).
    pub record_timing: bool,
    /// Worker threads for per-task steps; `None` runs sequentially.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lambda1: 0.9,
            lambda2: 0.9,
            alpha: vec![0.01],
            batch_size: 32,
            max_epochs: 100,
            convergence_window: 5,
            tolerance: 1e-4,
            seed: 0,
            fixed_masks: false,
            record_timing: false,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0)) {
            return bad("alpha weights must be positive".into());
        }
        if self.alpha.len() != 1 && self.alpha.len() != tasks {
            return bad(format!(
                "{} alpha weights for {tasks} tasks",
                self.alpha.len()
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.convergence_window == 0 {
            return bad("convergence window must be at least 1".into());
        }
        Ok(())
    }

    pub fn alpha_for(&self, task: usize) -> f64 {
        if self.alpha.len() == 1 {
            self.alpha[0]
        } else {
            self.alpha[task]
        }
    }

    /// Same config with the alignment term switched off.
    pub fn without_alignment(&self) -> Self {
        Self {
            lambda2: 0.0,
            ..self.clone()
        }
    }

    /// Control run: masks pinned at 1, no L1 and no alignment.
    pub fn single_task_baseline(&self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            fixed_masks: true,
            ..self.clone()
        }
    }
}

/// One row of the metrics CSV. Loss columns are epoch means of per-batch values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task: usize,
    pub ce: f64,
    pub l1: f64,
    pub cmmd: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,task,ce,l1,cmmd,total,train_acc,test_acc,seconds";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            m.epoch, m.task, m.ce, m.l1, m.cmmd, m.total, m.train_acc, m.test_acc, m.seconds
        ));
    }
    out
}

/// Graph nodes of one task's loss.
#[derive(Debug, Clone, Copy)]
pub struct TaskLoss {
    pub total: NodeId,
    pub ce: NodeId,
    /// `Σ_l ‖Ψ_l‖₁`, unweighted; absent when λ1 = 0.
    pub l1: Option<NodeId>,
    /// `Σ_h CMMD_h`, unweighted; absent when λ2 = 0.
    pub cmmd: Option<NodeId>,
}

/// Unweighted term values of one task loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ce: f64,
    pub l1: f64,
    pub cmmd: f64,
    pub total: f64,
}

impl TaskLoss {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item());
        LossValues {
            ce: g.value(self.ce).item(),
            l1: v(self.l1),
            cmmd: v(self.cmmd),
            total: g.value(self.total).item(),
        }
    }
}

/// Builds the per-task loss on top of a forward pass. Terms whose weight is
/// zero are left out of the graph.
pub fn task_loss(
    g: &mut Graph,
    fwd: &TaskForward,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TaskLoss> {
    let ce = g.softmax_cross_entropy(fwd.logits, labels)?;
    let mut total = ce;
    let mut l1 = None;
    if cfg.lambda1 != 0.0 {
        let mut acc: Option<NodeId> = None;
        for &m in &fwd.params.masks {
            let n = g.l1_norm(m);
            acc = Some(match acc {
                Some(a) => g.add(a, n)?,
                None => n,
            });
        }
        if let Some(acc) = acc {
            let weighted = g.scale(acc, cfg.lambda1);
            total = g.add(total, weighted)?;
            l1 = Some(acc);
        }
    }
    let mut cmmd = None;
    if cfg.lambda2 != 0.0 {
        if let Some(d) = alignment_total(g, &fwd.aux_hidden, &fwd.hidden, labels)? {
            let weighted = g.scale(d, cfg.lambda2);
            total = g.add(total, weighted)?;
            cmmd = Some(d);
        }
    }
    Ok(TaskLoss {
        total,
        ce,
        l1,
        cmmd,
    })
}

/// `Σ_j α_j · L_j`.
pub fn total_loss(task_losses: &[f64], cfg: &TrainConfig) -> f64 {
    task_losses
        .iter()
        .enumerate()
        .map(|(j, l)| cfg.alpha_for(j) * l)
        .sum()
}

/// `p ← p − η·g`.
pub fn sgd_update(param: &mut Tensor, grad: &[f64], lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// `Ψ ← max(Ψ, 0)`.
pub fn project_nonnegative(mask: &mut Tensor) {
    for v in mask.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn step_layer(layer: &mut crate::network::Layer, ids: &LayerIds, g: &Graph, lr: f64) {
    if let Some(grad) = g.grad(ids.weight) {
        sgd_update(&mut layer.weight, grad, lr);
    }
    if let Some(grad) = g.grad(ids.bias) {
        sgd_update(&mut layer.bias, grad, lr);
    }
}

/// Applies one SGD step to every trainable task parameter, then projects the
/// masks back onto the non-negative orthant.
pub fn sgd_step(net: &mut TaskNetwork, g: &Graph, ids: &TaskParamIds, lr: f64, update_masks: bool) {
    for (layer, lid) in net.convs.iter_mut().zip(&ids.convs) {
        step_layer(layer, lid, g, lr);
    }
    if update_masks {
        for (mask, &mid) in net.masks.iter_mut().zip(&ids.masks) {
            if let Some(grad) = g.grad(mid) {
                sgd_update(mask, grad, lr);
            }
            project_nonnegative(mask);
        }
    }
    for (layer, lid) in net.fcs.iter_mut().zip(&ids.fcs) {
        step_layer(layer, lid, g, lr);
    }
    step_layer(&mut net.head, &ids.head, g, lr);
}

const EVAL_CHUNK: usize = 256;

/// Fraction of samples whose argmax logit equals the (local) label.
pub fn evaluate(net: &TaskNetwork, aux: &AuxModel, split: &LabeledSet) -> Result<f64> {
    if split.is_empty() {
        return Err(DataError::EmptySplit.into());
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = split.gather(chunk);
        let logits = net.logits(aux, x)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

pub fn evaluate_aux(aux: &AuxModel, split: &LabeledSet) -> Result<f64> {
    if split.is_empty() {
        return Err(DataError::EmptySplit.into());
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = split.gather(chunk);
        let logits = aux.logits(x)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Largest relative change among the last `window` epoch-to-epoch steps, if
/// there are enough epochs.
pub fn window_relative_change(history: &[f64], window: usize) -> Option<f64> {
    if history.len() < window + 1 {
        return None;
    }
    let tail = &history[history.len() - window - 1..];
    Some(
        tail.windows(2)
            .map(|w| (w[1] - w[0]).abs() / w[0].abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub convergence_window: usize,
    pub tolerance: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
            convergence_window: 5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub model: AuxModel,
    /// Mean per-sample cross-entropy of each epoch.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Plain SGD on mean cross-entropy over the auxiliary class set.
pub fn pretrain_aux(
    data: &LabeledSet,
    arch: Architecture,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if data.is_empty() {
        return Err(DataError::EmptySplit.into());
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || cfg.convergence_window == 0 {
        return Err(TrainError::Config(
            "pretraining needs a positive learning rate, batch size and window".into(),
        ));
    }
    let mut model = AuxModel::init(arch, data.class_count, seed)?;
    if data.image_shape() != model.arch.input {
        return Err(NetworkError::InputShape {
            expected: model.arch.input,
            found: data.image_shape().to_vec(),
        }
        .into());
    }
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(data.len(), cfg.batch_size, seed, epoch, usize::MAX)? {
            let (x, labels) = data.gather(&batch);
            let mut g = Graph::new();
            let fwd = aux_forward(&mut g, &model, x, true)?;
            let ce = g.softmax_cross_entropy(fwd.logits, &labels)?;
            sum += g.value(ce).item();
            let loss = g.scale(ce, 1.0 / labels.len() as f64);
            g.backward(loss)?;
            let ids = fwd
                .convs
                .iter()
                .chain(&fwd.fcs)
                .chain(std::iter::once(&fwd.head));
            for (layer, lid) in model.layers_mut().zip(ids) {
                step_layer(layer, lid, &g, cfg.learning_rate);
            }
        }
        losses.push(sum / data.len() as f64);
        if window_relative_change(&losses, cfg.convergence_window)
            .is_some_and(|c| c < cfg.tolerance)
        {
            break;
        }
    }
    let train_accuracy = evaluate_aux(&model, data)?;
    Ok(PretrainOutcome {
        model,
        losses,
        train_accuracy,
    })
}

/// Passed to the observer after every optimizer step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub round: usize,
    pub task: usize,
    pub loss: LossValues,
    pub net: &'a TaskNetwork,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub networks: Vec<TaskNetwork>,
    /// Rows ordered by `(epoch, task)`.
    pub metrics: Vec<EpochMetrics>,
    /// Epoch mean of the per-round joint objective `Σ_j α_j L_j`.
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn final_test_accuracy(&self, task: usize) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.task == task)
            .map(|m| m.test_acc)
    }
}

#[derive(Default, Clone, Copy)]
struct EpochAccumulator {
    ce: f64,
    l1: f64,
    cmmd: f64,
    total: f64,
    batches: usize,
    correct: usize,
    seen: usize,
}

struct StepResult {
    loss: LossValues,
    correct: usize,
    seen: usize,
}

fn train_step(
    net: &mut TaskNetwork,
    aux: &AuxModel,
    ds: &TaskDataset,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let (x, labels) = ds.train.gather(batch);
    let mut g = Graph::new();
    let opts = ForwardOptions {
        trainable: true,
        trainable_masks: !cfg.fixed_masks,
        aux_stream: cfg.lambda2 != 0.0,
    };
    let fwd = task_forward(&mut g, net, aux, x, opts)?;
    let loss = task_loss(&mut g, &fwd, &labels, cfg)?;
    let weighted = g.scale(loss.total, cfg.alpha_for(ds.task_id));
    g.backward(weighted)?;
    sgd_step(net, &g, &fwd.params, cfg.learning_rate, !cfg.fixed_masks);
    debug_assert!(net.min_mask_entry() >= 0.0);

    let correct = argmax_rows(g.value(fwd.logits))
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(StepResult {
        loss: loss.values(&g),
        correct,
        seen: labels.len(),
    })
}

/// Joint training of all tasks against a frozen auxiliary model.
pub fn train_damtl(aux: &AuxModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_damtl_observed(aux, tasks, cfg, &mut |_| {})
}

/// [`train_damtl`] with a callback after every optimizer step.
pub fn train_damtl_observed(
    aux: &AuxModel,
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<TrainOutcome> {
    cfg.validate(tasks.len())?;
    for (j, t) in tasks.iter().enumerate() {
        if t.task_id != j {
            return Err(TrainError::Config(format!(
                "task at position {j} has id {}",
                t.task_id
            )));
        }
        if t.train.is_empty() {
            return Err(DataError::EmptySplit.into());
        }
    }
    let mut nets = tasks
        .iter()
        .map(|t| {
            let mut net = TaskNetwork::init(aux, t, cfg.seed)?;
            if cfg.fixed_masks {
                net.set_unit_masks();
            }
            Ok(net)
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = match cfg.threads {
        Some(n) if n > 1 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| TrainError::Config(e.to_string()))?,
        ),
        _ => None,
    };

    // the clock is only read on request: it is unavailable on wasm32
    let start = cfg.record_timing.then(Instant::now);
    let mut metrics = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    for epoch in 0..cfg.max_epochs {
        let plans = tasks
            .iter()
            .map(|t| batches(t.train.len(), cfg.batch_size, cfg.seed, epoch, t.task_id))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let rounds = plans.iter().map(Vec::len).max().unwrap_or(0);
        let mut acc = vec![EpochAccumulator::default(); tasks.len()];
        let mut round_objectives = Vec::with_capacity(rounds);

        for round in 0..rounds {
            let step_all = |nets: &mut [TaskNetwork]| -> Vec<Option<Result<StepResult>>> {
                let work = |(j, net): (usize, &mut TaskNetwork)| {
                    plans[j]
                        .get(round)
                        .map(|b| train_step(net, aux, &tasks[j], b, cfg))
                };
                match &pool {
                    Some(p) => p.install(|| nets.par_iter_mut().enumerate().map(work).collect()),
                    None => nets.iter_mut().enumerate().map(work).collect(),
                }
            };
            let results = step_all(&mut nets);
            let mut round_losses = vec![0.0; tasks.len()];
            for (j, res) in results.into_iter().enumerate() {
                let Some(res) = res else { continue };
                let res = res?;
                let a = &mut acc[j];
                a.ce += res.loss.ce;
                a.l1 += res.loss.l1;
                a.cmmd += res.loss.cmmd;
                a.total += res.loss.total;
                a.batches += 1;
                a.correct += res.correct;
                a.seen += res.seen;
                round_losses[j] = res.loss.total;
                observer(&StepEvent {
                    epoch,
                    round,
                    task: j,
                    loss: res.loss,
                    net: &nets[j],
                });
            }
            round_objectives.push(total_loss(&round_losses, cfg));
        }

        let seconds = start.map_or(0.0, |t| t.elapsed().as_secs_f64());
        for (j, a) in acc.iter().enumerate() {
            let n = a.batches.max(1) as f64;
            let (ce, l1, cmmd) = (a.ce / n, a.l1 / n, a.cmmd / n);
            metrics.push(EpochMetrics {
                epoch,
                task: j,
                ce,
                l1,
                cmmd,
                total: ce + cfg.lambda1 * l1 + cfg.lambda2 * cmmd,
                train_acc: a.correct as f64 / a.seen.max(1) as f64,
                test_acc: if tasks[j].test.is_empty() {
                    f64::NAN
                } else {
                    evaluate(&nets[j], aux, &tasks[j].test)?
                },
                seconds,
            });
        }
        objective.push(round_objectives.iter().sum::<f64>() / rounds.max(1) as f64);
        if window_relative_change(&objective, cfg.convergence_window)
            .is_some_and(|c| c < cfg.tolerance)
        {
            converged = true;
            break;
        }
    }

    Ok(TrainOutcome {
        networks: nets,
        metrics,
        objective,
        converged,
    })
}
