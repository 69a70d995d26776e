//! Browser bindings: three small operations the demo page calls. Each returns
//! a JSON string; the plain-Rust versions are exposed for native tests.

use damtl_core::dataset::{split_tasks, synthetic_glyphs, OverlapSpec, SplitOptions, SyntheticSpec};
use damtl_core::network::{extract_knowledge, masked_conv_forward, Architecture, ConvSpec};
use damtl_core::trainer::{pretrain_aux, train_damtl, PretrainConfig, TrainConfig};
use damtl_core::{class_means, cmmd_value, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SIDE: usize = 12;

#[derive(Debug, Serialize)]
pub struct MaskedConv {
    pub side: usize,
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub mask: Vec<f64>,
    pub extracted: Vec<f64>,
    pub out_side: usize,
    /// One map per output channel.
    pub output: Vec<Vec<f64>>,
}

/// Convolves one glyph with two edge kernels, each masked by `Ψ`. Entry
/// `i` of `Ψ` is `mask` when `i` is set in the 9-bit `keep` pattern, else 0.
pub fn masked_conv(class: usize, mask: f64, keep: u32, seed: u64) -> Result<MaskedConv, String> {
    if !(mask >= 0.0) {
        return Err("mask values must be non-negative".into());
    }
    let set = synthetic_glyphs(&SyntheticSpec {
        classes: 10,
        per_class: 1,
        side: SIDE,
        noise: 0.1,
        seed,
    });
    let class = class % set.class_count;
    let input = set.image(class).to_vec();
    #[rustfmt::skip]
    let kernel = vec![
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ];
    let psi: Vec<f64> = (0..18)
        .map(|i| if keep & (1 << (i % 9)) != 0 { mask } else { 0.0 })
        .collect();
    let spec = ConvSpec {
        out_channels: 2,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, SIDE, SIDE], input.clone()).map_err(|e| e.to_string())?);
    let w = g.constant(Tensor::new(vec![2, 1, 3, 3], kernel.clone()).map_err(|e| e.to_string())?);
    let m = g.constant(Tensor::new(vec![2, 1, 3, 3], psi.clone()).map_err(|e| e.to_string())?);
    let b = g.constant(Tensor::zeros(&[2]));
    let s = extract_knowledge(&mut g, m, w).map_err(|e| e.to_string())?;
    let f = masked_conv_forward(&mut g, s, x, b, &spec).map_err(|e| e.to_string())?;
    let out = g.value(f).data();
    let per = SIDE * SIDE;
    Ok(MaskedConv {
        side: SIDE,
        input,
        kernel,
        mask: psi,
        extracted: g.value(s).data().to_vec(),
        out_side: SIDE,
        output: out.chunks(per).map(<[f64]>::to_vec).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct CmmdDemo {
    /// `[x, y]` rows of the aux-weight stream.
    pub aux: Vec<[f64; 2]>,
    pub task: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub aux_means: Vec<[f64; 2]>,
    pub task_means: Vec<[f64; 2]>,
    pub value: f64,
}

/// Three classes of 2-D features; the task stream is the aux stream with
/// each class pushed `drift` along its own direction plus `noise`.
pub fn cmmd_demo(drift: f64, noise: f64, seed: u64) -> Result<CmmdDemo, String> {
    if !(noise >= 0.0) {
        return Err("noise must be non-negative".into());
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let centres = [[-1.5, -1.0], [1.5, -1.0], [0.0, 1.6]];
    let dirs = [[1.0, 0.0], [0.0, 1.0], [-0.7, -0.7]];
    let per = 20;
    let (mut aux, mut task, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..3 {
        for _ in 0..per {
            let p = [
                centres[c][0] + r.gen_range(-0.6..0.6),
                centres[c][1] + r.gen_range(-0.6..0.6),
            ];
            let q = [
                p[0] + drift * dirs[c][0] + noise * r.gen_range(-1.0..1.0),
                p[1] + drift * dirs[c][1] + noise * r.gen_range(-1.0..1.0),
            ];
            aux.push(p);
            task.push(q);
            labels.push(c);
        }
    }
    let to_tensor = |v: &[[f64; 2]]| Tensor::new(vec![v.len(), 2], v.iter().flatten().copied().collect());
    let (a, t) = (to_tensor(&aux).map_err(|e| e.to_string())?, to_tensor(&task).map_err(|e| e.to_string())?);
    let value = cmmd_value(&a, &t, &labels).map_err(|e| e.to_string())?;
    let means = |x: &Tensor| -> Result<Vec<[f64; 2]>, String> {
        let m = class_means(x, &labels, 3).map_err(|e| e.to_string())?;
        Ok((0..3)
            .filter_map(|c| m.get(c).map(|(v, _)| [v[0], v[1]]))
            .collect())
    };
    Ok(CmmdDemo {
        aux_means: means(&a)?,
        task_means: means(&t)?,
        aux,
        task,
        labels,
        value,
    })
}

#[derive(Debug, Serialize)]
pub struct TrainingCurve {
    pub aux_train_accuracy: f64,
    pub objective: Vec<f64>,
    /// `[task][epoch]`.
    pub test_accuracy: Vec<Vec<f64>>,
    pub cmmd: Vec<Vec<f64>>,
    pub mask_density: Vec<f64>,
}

/// Two 3-class tasks sharing one class on small glyphs: pretrains an aux
/// network, then trains both tasks jointly.
pub fn training_curve(lambda1: f64, lambda2: f64, epochs: usize, seed: u64) -> Result<TrainingCurve, String> {
    if epochs == 0 || epochs > 60 {
        return Err("epochs must be between 1 and 60".into());
    }
    let base = synthetic_glyphs(&SyntheticSpec {
        classes: 5,
        per_class: 80,
        side: SIDE,
        noise: 0.2,
        seed,
    });
    let spec = OverlapSpec {
        tasks: 2,
        classes_per_task: 3,
        shared: 1,
        seed,
    };
    let split = split_tasks(&base, &spec, &SplitOptions::default()).map_err(|e| e.to_string())?;
    let arch = Architecture {
        input: [1, SIDE, SIDE],
        convs: vec![ConvSpec {
            out_channels: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
        }],
        hidden: vec![24, 12],
    };
    let pre = pretrain_aux(
        &split.aux,
        arch,
        &PretrainConfig {
            epochs: 20,
            batch_size: 16,
            ..PretrainConfig::default()
        },
        seed,
    )
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lambda1,
        lambda2,
        learning_rate: 0.01,
        alpha: vec![1.0],
        batch_size: 16,
        max_epochs: epochs,
        tolerance: 0.0,
        seed,
        ..TrainConfig::default()
    };
    let out = train_damtl(&pre.model, &split.tasks, &cfg).map_err(|e| e.to_string())?;
    let column = |f: fn(&damtl_core::EpochMetrics) -> f64| -> Vec<Vec<f64>> {
        (0..split.tasks.len())
            .map(|j| out.metrics.iter().filter(|m| m.task == j).map(f).collect())
            .collect()
    };
    Ok(TrainingCurve {
        aux_train_accuracy: pre.train_accuracy,
        objective: out.objective.clone(),
        test_accuracy: column(|m| m.test_acc),
        cmmd: column(|m| m.cmmd),
        mask_density: out.networks.iter().map(|n| n.mask_density(1e-3)).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = maskedConv)]
pub fn masked_conv_js(class: u32, mask: f64, keep: u32, seed: u32) -> Result<String, JsValue> {
    to_js(masked_conv(class as usize, mask, keep, seed as u64))
}

#[wasm_bindgen(js_name = cmmdDemo)]
pub fn cmmd_demo_js(drift: f64, noise: f64, seed: u32) -> Result<String, JsValue> {
    to_js(cmmd_demo(drift, noise, seed as u64))
}

#[wasm_bindgen(js_name = trainingCurve)]
pub fn training_curve_js(lambda1: f64, lambda2: f64, epochs: u32, seed: u32) -> Result<String, JsValue> {
    to_js(training_curve(lambda1, lambda2, epochs as usize, seed as u64))
}
