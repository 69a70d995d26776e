//! Auxiliary model, masked task networks and their forward passes.
//!
//! A task network keeps its own copy `W` of every auxiliary conv kernel and a
//! non-negative mask `Ψ` of the same shape. The kernel actually convolved is
//! the extracted knowledge `S = Ψ ⊙ W`, followed by bias and ReLU. The hidden
//! FC layers run twice on the same inputs: once with the task's weights and
//! once with the frozen auxiliary weights, and the two streams feed the
//! alignment penalty.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::TaskDataset;
use crate::rng;
use crate::tensor::{conv_out_dim, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask of conv layer {layer} has negative entry {value} at {index}")]
    NegativeMask {
        layer: usize,
        index: usize,
        value: f64,
    },
    #[error("input shape {found:?} does not match architecture input {expected:?}")]
    InputShape {
        expected: [usize; 3],
        found: Vec<usize>,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Layer layout shared by the auxiliary model and every task network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    /// Widths of the hidden FC layers; the class head comes after them.
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// Two stride-2 3×3 convolutions (8 and 16 channels) and FC widths 64, 32.
    pub fn desk(input: [usize; 3]) -> Self {
        let conv = |out_channels| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        Self {
            input,
            convs: vec![conv(8), conv(16)],
            hidden: vec![64, 32],
        }
    }

    /// Output shape `[C, H, W]` after each conv layer.
    pub fn conv_output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.convs.len());
        for (l, c) in self.convs.iter().enumerate() {
            let h = conv_out_dim(shape[1], c.kernel, c.stride, c.padding);
            let w = conv_out_dim(shape[2], c.kernel, c.stride, c.padding);
            match (h, w) {
                (Some(h), Some(w)) if c.out_channels > 0 => shape = [c.out_channels, h, w],
                _ => {
                    return Err(NetworkError::Architecture(format!(
                        "conv layer {l} does not fit input {shape:?}"
                    )))
                }
            }
            out.push(shape);
        }
        Ok(out)
    }

    pub fn kernel_shapes(&self) -> Vec<[usize; 4]> {
        let mut in_channels = self.input[0];
        self.convs
            .iter()
            .map(|c| {
                let s = [c.out_channels, in_channels, c.kernel, c.kernel];
                in_channels = c.out_channels;
                s
            })
            .collect()
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let last = self
            .conv_output_shapes()?
            .last()
            .copied()
            .unwrap_or(self.input);
        Ok(last.iter().product())
    }

    /// `(in, out)` of each hidden FC layer.
    pub fn fc_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut fan_in = self.flat_dim()?;
        Ok(self
            .hidden
            .iter()
            .map(|&w| {
                let s = (fan_in, w);
                fan_in = w;
                s
            })
            .collect())
    }

    pub fn head_in(&self) -> Result<usize> {
        Ok(match self.hidden.last() {
            Some(&w) => w,
            None => self.flat_dim()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(NetworkError::Architecture("empty input shape".into()));
        }
        if self.hidden.contains(&0) {
            return Err(NetworkError::Architecture("zero-width FC layer".into()));
        }
        self.conv_output_shapes().map(|_| ())
    }
}

/// Weight and bias of one layer. Conv weights are OIHW, FC weights are `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn fresh_layers(arch: &Architecture, rng: &mut rng::Rng) -> Result<(Vec<Layer>, Vec<Layer>)> {
    let convs = arch
        .kernel_shapes()
        .iter()
        .map(|s| Layer {
            weight: he_normal(s, s[1] * s[2] * s[3], rng),
            bias: Tensor::zeros(&[s[0]]),
        })
        .collect();
    let fcs = arch
        .fc_shapes()?
        .iter()
        .map(|&(i, o)| Layer {
            weight: he_normal(&[i, o], i, rng),
            bias: Tensor::zeros(&[o]),
        })
        .collect();
    Ok((convs, fcs))
}

/// The pretrained network whose knowledge the tasks draw on.
///
/// Nothing in multi-task training mutates an `AuxModel`; task networks hold
/// deep copies of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxModel {
    pub arch: Architecture,
    pub convs: Vec<Layer>,
    pub fcs: Vec<Layer>,
    pub head: Layer,
}

impl AuxModel {
    pub fn init(arch: Architecture, num_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, "aux-init", 0, 0);
        let (convs, fcs) = fresh_layers(&arch, &mut rng)?;
        let head_in = arch.head_in()?;
        let head = Layer {
            weight: he_normal(&[head_in, num_classes], head_in, &mut rng),
            bias: Tensor::zeros(&[num_classes]),
        };
        Ok(Self {
            arch,
            convs,
            fcs,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.bias.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.convs.iter().enumerate() {
            out.push((format!("conv{l}.weight"), &layer.weight));
            out.push((format!("conv{l}.bias"), &layer.bias));
        }
        for (h, layer) in self.fcs.iter().enumerate() {
            out.push((format!("fc{h}.weight"), &layer.weight));
            out.push((format!("fc{h}.bias"), &layer.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.convs
            .iter_mut()
            .chain(self.fcs.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn digest(&self) -> [u8; 32] {
        digest_tensors(&self.named_tensors())
    }
}

pub(crate) fn digest_tensors(tensors: &[(String, &Tensor)]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

/// Per-task network: masked copies of the auxiliary convs, task FC layers and
/// a head over the task's own classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNetwork {
    pub task_id: usize,
    pub arch: Architecture,
    /// `label_map[local] = global`.
    pub label_map: Vec<usize>,
    pub convs: Vec<Layer>,
    pub masks: Vec<Tensor>,
    pub fcs: Vec<Layer>,
    pub head: Layer,
}

/// Half-width of the uniform mask initialisation around 1.
pub const MASK_INIT_SPREAD: f64 = 0.1;

impl TaskNetwork {
    /// Copies `W` and `f` from the auxiliary model, draws `Ψ ~ U(0.9, 1.1)` and
    /// a fresh He-normal head over the task's classes.
    pub fn init(aux: &AuxModel, ds: &TaskDataset, seed: u64) -> Result<Self> {
        let found = ds.train.image_shape();
        if found != aux.arch.input {
            return Err(NetworkError::InputShape {
                expected: aux.arch.input,
                found: found.to_vec(),
            });
        }
        let mut rng = rng::stream(seed, "task-init", ds.task_id as u64, 0);
        let masks = aux
            .convs
            .iter()
            .map(|l| {
                Tensor::from_fn(l.weight.shape(), |_| {
                    rng.gen_range(1.0 - MASK_INIT_SPREAD..1.0 + MASK_INIT_SPREAD)
                })
            })
            .collect();
        let head_in = aux.arch.head_in()?;
        let classes = ds.num_classes();
        let head = Layer {
            weight: he_normal(&[head_in, classes], head_in, &mut rng),
            bias: Tensor::zeros(&[classes]),
        };
        Ok(Self {
            task_id: ds.task_id,
            arch: aux.arch.clone(),
            label_map: ds.label_map.clone(),
            convs: aux.convs.clone(),
            masks,
            fcs: aux.fcs.clone(),
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.bias.len()
    }

    pub fn set_unit_masks(&mut self) {
        for m in &mut self.masks {
            m.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.convs.iter().enumerate() {
            out.push((format!("conv{l}.weight"), &layer.weight));
            out.push((format!("conv{l}.mask"), &self.masks[l]));
            out.push((format!("conv{l}.bias"), &layer.bias));
        }
        for (h, layer) in self.fcs.iter().enumerate() {
            out.push((format!("fc{h}.weight"), &layer.weight));
            out.push((format!("fc{h}.bias"), &layer.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        digest_tensors(&self.named_tensors())
    }

    /// Fraction of mask entries at or above `threshold`.
    pub fn mask_density(&self, threshold: f64) -> f64 {
        let total: usize = self.masks.iter().map(Tensor::len).sum();
        let kept = self
            .masks
            .iter()
            .flat_map(|m| m.data())
            .filter(|v| **v >= threshold)
            .count();
        kept as f64 / total as f64
    }

    pub fn min_mask_entry(&self) -> f64 {
        self.masks
            .iter()
            .flat_map(|m| m.data())
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// `S = Ψ ⊙ W`.
pub fn extract_knowledge(g: &mut Graph, mask: NodeId, weight: NodeId) -> Result<NodeId> {
    if let Some((index, &value)) = g
        .value(mask)
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < 0.0)
    {
        return Err(NetworkError::NegativeMask {
            layer: 0,
            index,
            value,
        });
    }
    Ok(g.hadamard(mask, weight)?)
}

/// `ReLU(conv2d(prev, S) + b)`.
pub fn masked_conv_forward(
    g: &mut Graph,
    extracted: NodeId,
    prev: NodeId,
    bias: NodeId,
    spec: &ConvSpec,
) -> Result<NodeId> {
    let z = g.conv2d(prev, extracted, spec.stride, spec.padding)?;
    let z = g.add_bias(z, bias)?;
    Ok(g.relu(z))
}

fn fc(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let z = g.matmul(x, w)?;
    Ok(g.add_bias(z, b)?)
}

fn check_input(arch: &Architecture, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != arch.input {
        return Err(NetworkError::InputShape {
            expected: arch.input,
            found: s.to_vec(),
        });
    }
    Ok(())
}

/// Leaf ids of one layer in a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct TaskParamIds {
    pub convs: Vec<LayerIds>,
    pub masks: Vec<NodeId>,
    pub fcs: Vec<LayerIds>,
    pub head: LayerIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Register task parameters as trainable leaves.
    pub trainable: bool,
    /// Register masks as trainable leaves (ignored unless `trainable`).
    pub trainable_masks: bool,
    /// Also run the frozen auxiliary FC weights on each hidden layer's input.
    pub aux_stream: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            trainable: true,
            trainable_masks: true,
            aux_stream: true,
        }
    }
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            trainable: false,
            trainable_masks: false,
            aux_stream: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskForward {
    pub logits: NodeId,
    /// `S` per conv layer.
    pub extracted: Vec<NodeId>,
    /// `F` per conv layer.
    pub conv_outputs: Vec<NodeId>,
    /// Task-weight output of each hidden FC layer (`O^1..O^H`).
    pub hidden: Vec<NodeId>,
    /// Auxiliary-weight output of each hidden FC layer on the same inputs.
    pub aux_hidden: Vec<NodeId>,
    pub params: TaskParamIds,
}

/// Registers a task network's parameters as graph leaves.
pub fn register_task_params(g: &mut Graph, net: &TaskNetwork, opts: ForwardOptions) -> TaskParamIds {
    let leaf = |g: &mut Graph, t: &Tensor, trainable: bool| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    let layer_ids = |g: &mut Graph, layer: &Layer| LayerIds {
        weight: leaf(g, &layer.weight, opts.trainable),
        bias: leaf(g, &layer.bias, opts.trainable),
    };
    let mut convs = Vec::new();
    let mut masks = Vec::new();
    for (layer, mask) in net.convs.iter().zip(&net.masks) {
        let weight = leaf(g, &layer.weight, opts.trainable);
        masks.push(leaf(g, mask, opts.trainable && opts.trainable_masks));
        let bias = leaf(g, &layer.bias, opts.trainable);
        convs.push(LayerIds { weight, bias });
    }
    let fcs = net.fcs.iter().map(|l| layer_ids(g, l)).collect();
    let head = layer_ids(g, &net.head);
    TaskParamIds {
        convs,
        masks,
        fcs,
        head,
    }
}

impl TaskParamIds {
    /// Rebuilds the ids from a flat list in [`TaskNetwork::named_tensors`] order.
    pub fn from_flat(ids: &[NodeId], conv_layers: usize, fc_layers: usize) -> Self {
        assert_eq!(ids.len(), 3 * conv_layers + 2 * fc_layers + 2, "parameter count");
        let convs = (0..conv_layers)
            .map(|l| LayerIds {
                weight: ids[3 * l],
                bias: ids[3 * l + 2],
            })
            .collect();
        let masks = (0..conv_layers).map(|l| ids[3 * l + 1]).collect();
        let base = 3 * conv_layers;
        let fcs = (0..fc_layers)
            .map(|h| LayerIds {
                weight: ids[base + 2 * h],
                bias: ids[base + 2 * h + 1],
            })
            .collect();
        let head = LayerIds {
            weight: ids[base + 2 * fc_layers],
            bias: ids[base + 2 * fc_layers + 1],
        };
        Self {
            convs,
            masks,
            fcs,
            head,
        }
    }
}

/// Masked conv stack, task FC layers with the parallel auxiliary stream, and head.
pub fn task_forward(
    g: &mut Graph,
    net: &TaskNetwork,
    aux: &AuxModel,
    x: Tensor,
    opts: ForwardOptions,
) -> Result<TaskForward> {
    let params = register_task_params(g, net, opts);
    task_forward_with(g, &net.arch, params, aux, x, opts.aux_stream)
}

/// [`task_forward`] over parameter nodes that are already in the graph.
pub fn task_forward_with(
    g: &mut Graph,
    arch: &Architecture,
    params: TaskParamIds,
    aux: &AuxModel,
    x: Tensor,
    aux_stream: bool,
) -> Result<TaskForward> {
    check_input(arch, &x)?;
    let mut h = g.constant(x);
    let mut extracted = Vec::new();
    let mut conv_outputs = Vec::new();
    for (l, spec) in arch.convs.iter().enumerate() {
        let ids = params.convs[l];
        let s = extract_knowledge(g, params.masks[l], ids.weight).map_err(|e| match e {
            NetworkError::NegativeMask { index, value, .. } => NetworkError::NegativeMask {
                layer: l,
                index,
                value,
            },
            other => other,
        })?;
        h = masked_conv_forward(g, s, h, ids.bias, spec)?;
        extracted.push(s);
        conv_outputs.push(h);
    }

    h = g.flatten(h)?;
    let mut hidden = Vec::new();
    let mut aux_hidden = Vec::new();
    for (ids, aux_layer) in params.fcs.iter().zip(&aux.fcs) {
        if aux_stream {
            let w = g.constant(aux_layer.weight.clone());
            let b = g.constant(aux_layer.bias.clone());
            let a = fc(g, h, w, b)?;
            aux_hidden.push(g.relu(a));
        }
        let z = fc(g, h, ids.weight, ids.bias)?;
        h = g.relu(z);
        hidden.push(h);
    }
    let logits = fc(g, h, params.head.weight, params.head.bias)?;

    Ok(TaskForward {
        logits,
        extracted,
        conv_outputs,
        hidden,
        aux_hidden,
        params,
    })
}

#[derive(Debug, Clone)]
pub struct AuxForward {
    pub logits: NodeId,
    pub conv_outputs: Vec<NodeId>,
    pub hidden: Vec<NodeId>,
    pub convs: Vec<LayerIds>,
    pub fcs: Vec<LayerIds>,
    pub head: LayerIds,
}

/// Plain (unmasked) forward pass of the auxiliary model.
pub fn aux_forward(g: &mut Graph, aux: &AuxModel, x: Tensor, trainable: bool) -> Result<AuxForward> {
    check_input(&aux.arch, &x)?;
    let layer_ids = |g: &mut Graph, layer: &Layer| {
        let (w, b) = (layer.weight.clone(), layer.bias.clone());
        if trainable {
            LayerIds {
                weight: g.param(w),
                bias: g.param(b),
            }
        } else {
            LayerIds {
                weight: g.constant(w),
                bias: g.constant(b),
            }
        }
    };
    let mut h = g.constant(x);
    let mut convs = Vec::new();
    let mut conv_outputs = Vec::new();
    for (layer, spec) in aux.convs.iter().zip(&aux.arch.convs) {
        let ids = layer_ids(g, layer);
        h = masked_conv_forward(g, ids.weight, h, ids.bias, spec)?;
        convs.push(ids);
        conv_outputs.push(h);
    }
    h = g.flatten(h)?;
    let mut fcs = Vec::new();
    let mut hidden = Vec::new();
    for layer in &aux.fcs {
        let ids = layer_ids(g, layer);
        let z = fc(g, h, ids.weight, ids.bias)?;
        h = g.relu(z);
        fcs.push(ids);
        hidden.push(h);
    }
    let head = layer_ids(g, &aux.head);
    let logits = fc(g, h, head.weight, head.bias)?;
    Ok(AuxForward {
        logits,
        conv_outputs,
        hidden,
        convs,
        fcs,
        head,
    })
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

impl TaskNetwork {
    /// Logits for a batch, without building any trainable state.
    pub fn logits(&self, aux: &AuxModel, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let fwd = task_forward(&mut g, self, aux, x, ForwardOptions::inference())?;
        Ok(g.value(fwd.logits).clone())
    }
}

impl AuxModel {
    pub fn logits(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let fwd = aux_forward(&mut g, self, x, false)?;
        Ok(g.value(fwd.logits).clone())
    }
}
