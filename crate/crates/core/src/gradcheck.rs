//! Central finite-difference checks for graph gradients.

use crate::tensor::{Graph, NodeId, Result, Tensor};

/// Floor for the relative-error denominator, so coordinates whose true
/// derivative is exactly zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the autodiff gradient of `f` against central differences.
///
/// `f` receives a fresh graph and the leaf ids of `params` (registered as
/// trainable, in order) and returns the scalar loss node.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    let (mut g, ids, loss) = eval(params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.grad(*id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut values = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: p,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_coordinate: 0,
        };
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + eps;
            let (g_plus, _, l_plus) = eval(&values)?;
            values[p].data_mut()[i] = orig - eps;
            let (g_minus, _, l_minus) = eval(&values)?;
            values[p].data_mut()[i] = orig;

            let numeric =
                (g_plus.value(l_plus).item() - g_minus.value(l_minus).item()) / (2.0 * eps);
            let rel = relative_error(grads[i], numeric);
            check.max_abs_error = check.max_abs_error.max((grads[i] - numeric).abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_coordinate = i;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: tol,
    })
}

/// Finite-difference step and pass threshold used by [`standard_suite`].
pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Result of one named check in [`standard_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], rng: &mut crate::rng::Rng, lo: f64, hi: f64) -> Tensor {
    use rand::Rng as _;
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Every graph op, the masked conv layer, CMMD and the full per-task loss
/// on a two-conv / two-FC toy network, all on seeded random inputs.
pub fn standard_suite(seed: u64) -> std::result::Result<Vec<NamedCheck>, crate::network::NetworkError> {
    use crate::dataset::{LabeledSet, TaskDataset};
    use crate::network::{
        extract_knowledge, masked_conv_forward, task_forward_with, Architecture, AuxModel,
        ConvSpec, TaskNetwork, TaskParamIds,
    };
    use crate::trainer::{task_loss, TrainConfig};

    let mut r = crate::rng::stream(seed, "gradcheck", 0, 0);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   params: Vec<Tensor>,
                   f: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>|
     -> Result<()> {
        let report = grad_check(f, &params, SUITE_EPS, SUITE_TOLERANCE)?;
        out.push(NamedCheck { name, report });
        Ok(())
    };

    let x = uniform(&[2, 2, 5, 5], &mut r, -1.0, 1.0);
    let k = uniform(&[3, 2, 3, 3], &mut r, -1.0, 1.0);
    let wts = uniform(&[2, 3, 3, 3], &mut r, -1.0, 1.0);
    run("conv2d", vec![x.clone(), k.clone()], &|g, p| {
        let y = g.conv2d(p[0], p[1], 2, 1)?;
        let w = g.constant(wts.clone());
        let z = g.hadamard(y, w)?;
        Ok(g.sum(z))
    })?;

    let a = uniform(&[3, 4], &mut r, -1.0, 1.0);
    let b = uniform(&[3, 4], &mut r, -1.0, 1.0);
    run("hadamard/add/sub/scale/mean", vec![a.clone(), b.clone()], &|g, p| {
        let h = g.hadamard(p[0], p[1])?;
        let s = g.sub(h, p[1])?;
        let t = g.add(s, p[0])?;
        let u = g.scale(t, -1.7);
        let sq = g.hadamard(u, u)?;
        Ok(g.mean(sq))
    })?;
    run("relu/l1_norm/sum", vec![a, b], &|g, p| {
        let r = g.relu(p[0]);
        let l = g.l1_norm(p[1]);
        let s = g.sum(r);
        g.add(s, l)
    })?;

    let xm = uniform(&[4, 5], &mut r, -1.0, 1.0);
    let wm = uniform(&[5, 3], &mut r, -1.0, 1.0);
    let bm = uniform(&[3], &mut r, -1.0, 1.0);
    run("matmul/add_bias/softmax_cross_entropy", vec![xm, wm, bm], &|g, p| {
        let z = g.matmul(p[0], p[1])?;
        let z = g.add_bias(z, p[2])?;
        g.softmax_cross_entropy(z, &[0, 2, 1, 2])
    })?;

    let maps = uniform(&[2, 3, 2, 2], &mut r, -1.0, 1.0);
    let cb = uniform(&[3], &mut r, -1.0, 1.0);
    run("channel bias/flatten", vec![maps, cb], &|g, p| {
        let z = g.add_bias(p[0], p[1])?;
        let f = g.flatten(z)?;
        let sq = g.hadamard(f, f)?;
        Ok(g.sum(sq))
    })?;

    let spec = ConvSpec {
        out_channels: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let xs = uniform(&[2, 2, 5, 5], &mut r, 0.0, 1.0);
    let psi = uniform(&[3, 2, 3, 3], &mut r, 0.2, 1.5);
    let wk = uniform(&[3, 2, 3, 3], &mut r, -0.5, 0.5);
    let bk = uniform(&[3], &mut r, 0.0, 0.2);
    run("masked conv layer", vec![xs, psi, wk, bk], &|g, p| {
        let s = extract_knowledge(g, p[1], p[2]).map_err(into_tensor_error)?;
        let f = masked_conv_forward(g, s, p[0], p[3], &spec).map_err(into_tensor_error)?;
        let sq = g.hadamard(f, f)?;
        Ok(g.sum(sq))
    })?;

    let sa = uniform(&[12, 4], &mut r, -1.0, 1.0);
    let st = uniform(&[12, 4], &mut r, -1.0, 1.0);
    let labels = [0, 1, 2, 0, 1, 2, 0, 0, 1, 2, 2, 2];
    run("cmmd", vec![sa, st], &|g, p| crate::alignment::cmmd(g, p[0], p[1], &labels))?;

    // full per-task loss with every term active
    let arch = Architecture {
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
    };
    let mut aux = AuxModel::init(arch.clone(), 5, seed)?;
    for layer in aux.layers_mut() {
        layer.bias = uniform(layer.bias.shape(), &mut r, 0.05, 0.3);
    }
    let n = 6;
    let images = uniform(&[n * 36], &mut r, 0.0, 1.0).data().to_vec();
    let set = LabeledSet::new(images, (0..n).map(|i| i % 3).collect(), (1, 6, 6), 3)
        .expect("consistent toy set");
    let ds = TaskDataset {
        task_id: 0,
        label_map: vec![0, 1, 2],
        train: set.clone(),
        test: set,
        train_indices: (0..n).collect(),
        test_indices: (0..n).collect(),
    };
    let mut net = TaskNetwork::init(&aux, &ds, seed)?;
    for layer in net.fcs.iter_mut().chain(net.convs.iter_mut()) {
        let drift = uniform(layer.weight.shape(), &mut r, -0.2, 0.2);
        for (w, d) in layer.weight.data_mut().iter_mut().zip(drift.data()) {
            *w += d;
        }
    }
    for m in &mut net.masks {
        *m = uniform(m.shape(), &mut r, 0.3, 1.7);
    }
    let (x, labels) = ds.train.gather(&(0..n).collect::<Vec<_>>());
    let params: Vec<Tensor> = net.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let cfg = TrainConfig::default();
    run("task loss (ce + l1 + cmmd)", params, &|g, p| {
        let ids = TaskParamIds::from_flat(p, arch.convs.len(), arch.hidden.len());
        let fwd = task_forward_with(g, &arch, ids, &aux, x.clone(), true)
            .map_err(into_tensor_error)?;
        let loss = task_loss(g, &fwd, &labels, &cfg).map_err(|e| crate::tensor::TensorError::Invalid {
            op: "task_loss",
            reason: e.to_string(),
        })?;
        Ok(loss.total)
    })?;
    Ok(out)
}

fn into_tensor_error(e: crate::network::NetworkError) -> crate::tensor::TensorError {
    match e {
        crate::network::NetworkError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "network",
            reason: other.to_string(),
        },
    }
}
