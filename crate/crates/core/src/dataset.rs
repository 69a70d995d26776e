//! Labeled image corpora, task carving and mini-batching.
//!
//! A base corpus plays the auxiliary role: its full class set is the superset
//! of every task's classes. Tasks take windows of a seeded class permutation,
//! so adjacent tasks share exactly `shared` global classes.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file ({found} bytes, expected {expected})")]
    Truncated {
        path: String,
        found: usize,
        expected: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("infeasible overlap spec: {0}")]
    Infeasible(String),
    #[error("empty split")]
    EmptySplit,
    #[error("invalid batch size {0}")]
    BadBatchSize(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Images in `[0, 1]`, stored `count × C × H × W`, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
}

impl LabeledSet {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        (channels, height, width): (usize, usize, usize),
        class_count: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(DataError::CountMismatch {
                images: images.len().checked_div(per).unwrap_or(0),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            channels,
            height,
            width,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the chosen samples into an NCHW tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let shape = vec![indices.len(), self.channels, self.height, self.width];
        let x = Tensor::new(shape, data).expect("gather of a non-empty index set");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn checked_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            found: bytes.len(),
            expected,
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    checked_len(path, bytes, 4)?;
    let found = read_u32(bytes, 0);
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair (big-endian, unsigned bytes).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let img = fs::read(images_path).map_err(io_err(images_path))?;
    let lab = fs::read(labels_path).map_err(io_err(labels_path))?;

    check_magic(images_path, &img, IDX_IMAGES_MAGIC)?;
    checked_len(images_path, &img, 16)?;
    let count = read_u32(&img, 4) as usize;
    let rows = read_u32(&img, 8) as usize;
    let cols = read_u32(&img, 12) as usize;
    checked_len(images_path, &img, 16 + count * rows * cols)?;

    check_magic(labels_path, &lab, IDX_LABELS_MAGIC)?;
    checked_len(labels_path, &lab, 8)?;
    let label_count = read_u32(&lab, 4) as usize;
    checked_len(labels_path, &lab, 8 + label_count)?;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let images = img[16..16 + count * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledSet::new(images, labels, (1, rows, cols), classes)
}

/// Writes a single-channel set as an IDX pair, quantising pixels to bytes.
pub fn write_idx(set: &LabeledSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + set.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&((set.channels * set.height) as u32).to_be_bytes());
    img.extend_from_slice(&(set.width as u32).to_be_bytes());
    img.extend(
        set.images
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images_path, img).map_err(io_err(images_path))?;

    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lab.extend(set.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lab).map_err(io_err(labels_path))
}

/// Reads `label,px0,...,pxN` rows into square single-channel images.
///
/// Pixel values above 1 anywhere in the file mean the file uses the 0–255
/// range, and every pixel is divided by 255.
pub fn load_csv(path: &Path) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    if headers.get(0) != Some("label") {
        return Err(DataError::Csv("first column must be `label`".into()));
    }
    let pixels = headers.len() - 1;
    let side = (pixels as f64).sqrt().round() as usize;
    if pixels == 0 || side * side != pixels {
        return Err(DataError::Csv(format!(
            "{pixels} pixel columns do not form a square image"
        )));
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(format!("row {}: {e}", row + 1)))?;
        if record.len() != headers.len() {
            return Err(DataError::Csv(format!(
                "row {} has {} fields, expected {}",
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| DataError::Csv(format!("row {}: {e}", row + 1)))
        };
        let label = parse(&record[0])?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(DataError::Csv(format!("row {}: bad label {label}", row + 1)));
        }
        labels.push(label as usize);
        for field in record.iter().skip(1) {
            images.push(parse(field)?);
        }
    }
    if images.iter().any(|v| *v > 1.0) {
        images.iter_mut().for_each(|v| *v /= 255.0);
    }
    if images.iter().any(|v| *v < 0.0 || *v > 1.0) {
        return Err(DataError::Csv("pixel values outside [0, 255]".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledSet::new(images, labels, (1, side, side), classes)
}

pub fn write_csv(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for i in 0..set.sample_len() {
        out.push_str(&format!(",px{i}"));
    }
    out.push('\n');
    for i in 0..set.len() {
        out.push_str(&set.labels[i].to_string());
        for v in set.image(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(out.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 400,
            side: 12,
            noise: 0.25,
            seed: 0,
        }
    }
}

type Segment = [(f64, f64); 2];

fn segment_distance(p: (f64, f64), [a, b]: &Segment) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Stroke-glyph corpus: each class is three line segments, each sample a
/// jittered, shifted, noisy rendering of its class glyph.
pub fn synthetic_glyphs(spec: &SyntheticSpec) -> LabeledSet {
    let side = spec.side as f64;
    let mut proto_rng = rng::stream(spec.seed, "glyph-prototypes", 0, 0);
    let glyphs: Vec<Vec<Segment>> = (0..spec.classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let mut pt = || {
                        (
                            proto_rng.gen_range(1.5..side - 2.5),
                            proto_rng.gen_range(1.5..side - 2.5),
                        )
                    };
                    [pt(), pt()]
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite sigma");
    let width = 0.55 * side / 12.0;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class * spec.side * spec.side);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    let mut sample_rng = rng::stream(spec.seed, "glyph-samples", 0, 0);
    for i in 0..spec.classes * spec.per_class {
        let class = i % spec.classes;
        let shift = (
            sample_rng.gen_range(-1.0..=1.0),
            sample_rng.gen_range(-1.0..=1.0),
        );
        let amp = sample_rng.gen_range(0.6..1.0);
        let strokes: Vec<Segment> = glyphs[class]
            .iter()
            .map(|seg| {
                let mut jitter = |(x, y): (f64, f64)| {
                    (
                        x + shift.0 + sample_rng.gen_range(-1.0..1.0),
                        y + shift.1 + sample_rng.gen_range(-1.0..1.0),
                    )
                };
                [jitter(seg[0]), jitter(seg[1])]
            })
            .collect();
        for y in 0..spec.side {
            for x in 0..spec.side {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let d = strokes
                    .iter()
                    .map(|s| segment_distance(p, s))
                    .fold(f64::INFINITY, f64::min);
                let ink = amp * (-d * d / (2.0 * width * width)).exp();
                let v = if spec.noise > 0.0 {
                    ink + noise.sample(&mut sample_rng)
                } else {
                    ink
                };
                images.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    LabeledSet::new(images, labels, (1, spec.side, spec.side), spec.classes)
        .expect("generator produces consistent shapes")
}

/// Layout of tasks over the auxiliary class set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Global classes shared by consecutive tasks.
    pub shared: usize,
    pub seed: u64,
}

impl OverlapSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let (m, cj, k) = (self.tasks, self.classes_per_task, self.shared);
        if m == 0 || cj == 0 {
            return Err(DataError::Infeasible("need at least one task and one class".into()));
        }
        if k > cj {
            return Err(DataError::Infeasible(format!(
                "shared classes {k} exceed classes per task {cj}"
            )));
        }
        let needed = m * cj - (m - 1) * k;
        if needed > class_count {
            return Err(DataError::Infeasible(format!(
                "{m} tasks of {cj} classes sharing {k} need {needed} classes, corpus has {class_count}"
            )));
        }
        Ok(())
    }
}

/// How samples of a class used by several tasks are divided between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SharedSamples {
    /// Every sample belongs to at most one task.
    #[default]
    Partitioned,
    Duplicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitOptions {
    pub train_fraction: f64,
    /// Caps applied after the train/test partition.
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
    pub shared_samples: SharedSamples,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            max_train: Some(500),
            max_test: Some(300),
            shared_samples: SharedSamples::Partitioned,
        }
    }
}

/// One task's data; labels in `train` and `test` are local ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    /// `label_map[local] = global`.
    pub label_map: Vec<usize>,
    pub train: LabeledSet,
    pub test: LabeledSet,
    /// Base-corpus indices behind `train` and `test` (before caps these
    /// partition the task's pool).
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn to_global(&self, local: usize) -> Option<usize> {
        self.label_map.get(local).copied()
    }

    pub fn to_local(&self, global: usize) -> Option<usize> {
        self.label_map.iter().position(|&g| g == global)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task: usize,
    pub classes: Vec<usize>,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub spec: OverlapSpec,
    pub options: SplitOptions,
    pub aux_classes: Vec<usize>,
    pub aux_samples: usize,
    pub tasks: Vec<TaskManifest>,
}

#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub aux: LabeledSet,
    pub aux_classes: Vec<usize>,
    pub tasks: Vec<TaskDataset>,
    /// Pre-cap pool sizes per task.
    pub pool_sizes: Vec<usize>,
    manifest: SplitManifest,
}

impl TaskSplit {
    pub fn manifest(&self) -> &SplitManifest {
        &self.manifest
    }
}

/// Global classes of each task: windows of a seeded permutation of the base classes.
pub fn task_class_sets(class_count: usize, spec: &OverlapSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate(class_count)?;
    let mut perm: Vec<usize> = (0..class_count).collect();
    perm.shuffle(&mut rng::stream(spec.seed, "class-permutation", 0, 0));
    let step = spec.classes_per_task - spec.shared;
    Ok((0..spec.tasks)
        .map(|j| {
            let mut classes = perm[j * step..j * step + spec.classes_per_task].to_vec();
            classes.sort_unstable();
            classes
        })
        .collect())
}

pub fn split_tasks(base: &LabeledSet, spec: &OverlapSpec, opts: &SplitOptions) -> Result<TaskSplit> {
    if !(0.0..=1.0).contains(&opts.train_fraction) {
        return Err(DataError::Infeasible(format!(
            "train fraction {} outside [0, 1]",
            opts.train_fraction
        )));
    }
    let class_sets = task_class_sets(base.class_count, spec)?;
    let union: BTreeSet<usize> = class_sets.iter().flatten().copied().collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); base.class_count];
    for (i, &l) in base.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); spec.tasks];
    for &class in &union {
        let users: Vec<usize> = (0..spec.tasks)
            .filter(|&j| class_sets[j].contains(&class))
            .collect();
        let mut members = by_class[class].clone();
        members.shuffle(&mut rng::stream(spec.seed, "class-members", class as u64, 0));
        match opts.shared_samples {
            SharedSamples::Partitioned => {
                for (n, idx) in members.into_iter().enumerate() {
                    pools[users[n % users.len()]].push(idx);
                }
            }
            SharedSamples::Duplicated => {
                for &j in &users {
                    pools[j].extend_from_slice(&members);
                }
            }
        }
    }

    let aux_indices: Vec<usize> = (0..base.len())
        .filter(|&i| union.contains(&base.labels[i]))
        .collect();
    let aux = base.subset(&aux_indices);

    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut pool_sizes = Vec::with_capacity(spec.tasks);
    for (j, mut pool) in pools.into_iter().enumerate() {
        pool.sort_unstable();
        pool.shuffle(&mut rng::stream(spec.seed, "task-pool", j as u64, 0));
        pool_sizes.push(pool.len());
        let n_train = (opts.train_fraction * pool.len() as f64).round() as usize;
        let (train_all, test_all) = pool.split_at(n_train);
        let cap = |v: &[usize], c: Option<usize>| v[..c.map_or(v.len(), |c| c.min(v.len()))].to_vec();
        let train_idx = cap(train_all, opts.max_train);
        let test_idx = cap(test_all, opts.max_test);

        let label_map = class_sets[j].clone();
        let localise = |idx: &[usize]| {
            let mut set = base.subset(idx);
            for l in &mut set.labels {
                *l = label_map.iter().position(|g| g == l).expect("task class");
            }
            set.class_count = label_map.len();
            set
        };
        tasks.push(TaskDataset {
            task_id: j,
            train: localise(&train_idx),
            test: localise(&test_idx),
            label_map: label_map.clone(),
            train_indices: train_idx,
            test_indices: test_idx,
        });
    }

    let manifest = SplitManifest {
        seed: spec.seed,
        spec: *spec,
        options: *opts,
        aux_classes: union.iter().copied().collect(),
        aux_samples: aux.len(),
        tasks: tasks
            .iter()
            .map(|t| TaskManifest {
                task: t.task_id,
                classes: t.label_map.clone(),
                train: t.train.len(),
                test: t.test.len(),
            })
            .collect(),
    };
    Ok(TaskSplit {
        aux,
        aux_classes: union.into_iter().collect(),
        tasks,
        pool_sizes,
        manifest,
    })
}

/// Index batches over `n` samples for one epoch; the order depends only on
/// `(seed, epoch, task)`.
pub fn batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    task: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DataError::BadBatchSize(batch_size));
    }
    if n == 0 {
        return Err(DataError::EmptySplit);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "batches", epoch as u64, task as u64));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
