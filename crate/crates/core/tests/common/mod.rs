//! Independent straight-line oracles and small fixtures shared by the test targets.
//!
//! Nothing here touches `Graph`: every value is recomputed with plain loops.
#![allow(dead_code)]

use damtl_core::dataset::{LabeledSet, TaskDataset};
use damtl_core::network::{Architecture, AuxModel, ConvSpec, TaskNetwork};
use damtl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Direct cross-correlation with explicit zero padding.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let at = |b: usize, ch: usize, y: isize, x_: isize| -> f64 {
        if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + y as usize) * w + x_ as usize]
        }
    };
    let mut out = Vec::new();
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                s += at(b, ic, y, xx) * k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

pub fn naive_fc(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut s = b.data()[j];
            for i in 0..din {
                s += x[r * din + i] * w.data()[i * dout + j];
            }
            out[r * dout + j] = s;
        }
    }
    out
}

pub fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Conv (with the masked kernel), per-channel bias, ReLU.
pub fn naive_masked_conv(
    x: &Tensor,
    mask: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let s: Vec<f64> = mask.data().iter().zip(w.data()).map(|(m, w)| m * w).collect();
    let s = Tensor::new(w.shape().to_vec(), s).unwrap();
    let (shape, mut out) = naive_conv(x, &s, stride, pad);
    let per = shape[2] * shape[3];
    for (i, v) in out.iter_mut().enumerate() {
        *v += b.data()[(i / per) % shape[1]];
    }
    relu(&mut out);
    Tensor::new(shape, out).unwrap()
}

pub struct OracleForward {
    pub conv_outputs: Vec<Tensor>,
    pub hidden: Vec<Vec<f64>>,
    pub aux_hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

pub fn oracle_task_forward(net: &TaskNetwork, aux: &AuxModel, x: &Tensor) -> OracleForward {
    let n = x.shape()[0];
    let mut h = x.clone();
    let mut conv_outputs = Vec::new();
    for (l, spec) in net.arch.convs.iter().enumerate() {
        h = naive_masked_conv(
            &h,
            &net.masks[l],
            &net.convs[l].weight,
            &net.convs[l].bias,
            spec.stride,
            spec.padding,
        );
        conv_outputs.push(h.clone());
    }
    let mut flat = h.data().to_vec();
    let mut hidden = Vec::new();
    let mut aux_hidden = Vec::new();
    for (layer, aux_layer) in net.fcs.iter().zip(&aux.fcs) {
        let mut a = naive_fc(&flat, n, &aux_layer.weight, &aux_layer.bias);
        relu(&mut a);
        aux_hidden.push(a);
        let mut t = naive_fc(&flat, n, &layer.weight, &layer.bias);
        relu(&mut t);
        hidden.push(t.clone());
        flat = t;
    }
    let logits = naive_fc(&flat, n, &net.head.weight, &net.head.bias);
    OracleForward {
        conv_outputs,
        hidden,
        aux_hidden,
        logits,
    }
}

pub fn oracle_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += m + z.ln() - row[y];
    }
    total
}

/// Group rows by label, average each group in both streams, sum squared distances.
pub fn brute_force_cmmd(a: &[f64], t: &[f64], d: usize, labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for c in classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for j in 0..d {
            let ma: f64 = rows.iter().map(|&i| a[i * d + j]).sum::<f64>() / rows.len() as f64;
            let mt: f64 = rows.iter().map(|&i| t[i * d + j]).sum::<f64>() / rows.len() as f64;
            total += (ma - mt) * (ma - mt);
        }
    }
    total
}

/// Recomputes `CE + λ1 Σ‖Ψ‖₁ + λ2 Σ_h CMMD_h` without the graph.
pub fn oracle_task_loss(
    net: &TaskNetwork,
    aux: &AuxModel,
    x: &Tensor,
    labels: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> (f64, f64, f64, f64) {
    let fwd = oracle_task_forward(net, aux, x);
    let ce = oracle_cross_entropy(&fwd.logits, net.num_classes(), labels);
    let l1: f64 = net.masks.iter().flat_map(|m| m.data()).map(|v| v.abs()).sum();
    let cmmd: f64 = net
        .arch
        .hidden
        .iter()
        .enumerate()
        .map(|(h, &d)| brute_force_cmmd(&fwd.aux_hidden[h], &fwd.hidden[h], d, labels))
        .sum();
    (ce, l1, cmmd, ce + lambda1 * l1 + lambda2 * cmmd)
}

/// Two convs and two hidden FC layers on 6×6 inputs.
pub fn toy_arch() -> Architecture {
    Architecture {
        input: [1, 6, 6],
        convs: vec![
            ConvSpec {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            ConvSpec {
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ],
        hidden: vec![5, 4],
    }
}

pub fn toy_task(task_id: usize, classes: usize, n: usize, seed: u64) -> TaskDataset {
    let mut r = rng(seed);
    let images = (0..n * 36).map(|_| r.gen_range(0.0..1.0)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    let set = LabeledSet::new(images, labels, (1, 6, 6), classes).unwrap();
    TaskDataset {
        task_id,
        label_map: (0..classes).collect(),
        train: set.clone(),
        test: set,
        train_indices: (0..n).collect(),
        test_indices: (0..n).collect(),
    }
}

/// Toy aux model with non-zero biases and a task network whose parameters
/// have drifted away from it (so every loss term is active).
pub fn drifted_pair(seed: u64) -> (AuxModel, TaskNetwork, TaskDataset) {
    let mut aux = AuxModel::init(toy_arch(), 7, seed).unwrap();
    let mut r = rng(seed ^ 0xa5a5);
    for layer in aux.convs.iter_mut().chain(aux.fcs.iter_mut()) {
        layer.bias = random_tensor(layer.bias.shape(), &mut r, 0.05, 0.3);
    }
    let ds = toy_task(0, 3, 6, seed);
    let mut net = TaskNetwork::init(&aux, &ds, seed).unwrap();
    for layer in net.fcs.iter_mut().chain(net.convs.iter_mut()) {
        for v in layer.weight.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    for m in &mut net.masks {
        *m = random_tensor(m.shape(), &mut r, 0.3, 1.7);
    }
    (aux, net, ds)
}
