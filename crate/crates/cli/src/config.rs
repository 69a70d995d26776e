//! Experiment configuration: a sectioned TOML file where every unknown key is
//! rejected before anything runs.

use std::fs;
use std::path::{Path, PathBuf};

use damtl_core::dataset::{
    load_csv, load_idx, synthetic_glyphs, LabeledSet, SharedSamples, SplitOptions, SyntheticSpec,
};
use damtl_core::network::{Architecture, ConvSpec};
use damtl_core::trainer::{PretrainConfig, TrainConfig};
use damtl_core::OverlapSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Which variant of the method a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum Mode {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Alignment term removed (`lambda2 = 0`).
    #[serde(rename = "ablate-no-alignment", alias = "ablate")]
    Ablate,
    /// Masks fixed at one, `lambda1 = lambda2 = 0`.
    #[serde(rename = "single-task-baseline", alias = "single")]
    Single,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::Ablate, Mode::Single];

    /// Short tag used in file names and tables.
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Ablate => "ablate",
            Mode::Single => "single",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        match self {
            Mode::Full => cfg.clone(),
            Mode::Ablate => cfg.without_alignment(),
            Mode::Single => cfg.single_task_baseline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Seeded stroke-glyph corpus, redrawn from each run seed.
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::side")]
        side: usize,
        #[serde(default = "defaults::noise")]
        noise: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            classes: defaults::classes(),
            per_class: defaults::per_class(),
            side: defaults::side(),
            noise: defaults::noise(),
        }
    }
}

mod defaults {
    use std::path::PathBuf;

    pub fn classes() -> usize {
        10
    }
    pub fn per_class() -> usize {
        400
    }
    pub fn side() -> usize {
        12
    }
    pub fn noise() -> f64 {
        0.25
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

/// Task layout plus the train/test partition. A cap of 0 means uncapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub shared: usize,
    pub train_fraction: f64,
    pub max_train: usize,
    pub max_test: usize,
    pub shared_samples: SharedSamples,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            tasks: 2,
            classes_per_task: 6,
            shared: 3,
            train_fraction: 0.7,
            max_train: 500,
            max_test: 300,
            shared_samples: SharedSamples::Partitioned,
        }
    }
}

impl SplitConfig {
    pub fn overlap(&self, seed: u64) -> OverlapSpec {
        OverlapSpec {
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            shared: self.shared,
            seed,
        }
    }

    pub fn options(&self) -> SplitOptions {
        let cap = |n| (n > 0).then_some(n);
        SplitOptions {
            train_fraction: self.train_fraction,
            max_train: cap(self.max_train),
            max_test: cap(self.max_test),
            shared_samples: self.shared_samples,
        }
    }
}

/// Layer layout; the input shape is taken from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub convs: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let desk = Architecture::desk([1, 12, 12]);
        Self {
            convs: desk.convs,
            hidden: desk.hidden,
        }
    }
}

impl ArchConfig {
    pub fn for_input(&self, input: [usize; 3]) -> Architecture {
        Architecture {
            input,
            convs: self.convs.clone(),
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            seeds: defaults::seeds(),
            out_dir: defaults::out_dir(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, parses and validates a config file. Relative paths inside it
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        match &mut self.data {
            DataConfig::Synthetic { .. } => {}
            DataConfig::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DataConfig::Csv { path } => fix(path),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.split.train_fraction
            )));
        }
        self.train.validate(self.split.tasks)?;
        if let DataConfig::Synthetic {
            classes,
            per_class,
            side,
            noise,
        } = &self.data
        {
            if *classes == 0 || *per_class == 0 || *side < 4 || !(*noise >= 0.0) {
                return Err(CliError::Config("synthetic data needs classes, per_class >= 1, side >= 4 and noise >= 0".into()));
            }
            self.split.overlap(0).validate(*classes)?;
        }
        let missing = |p: &PathBuf| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::Data(format!("missing file {}", p.display())))
            }
        };
        match &self.data {
            DataConfig::Synthetic { .. } => {}
            DataConfig::Idx { images, labels } => {
                missing(images)?;
                missing(labels)?;
            }
            DataConfig::Csv { path } => missing(path)?,
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }

    /// The base corpus for one run seed.
    pub fn load_corpus(&self, seed: u64) -> Result<LabeledSet> {
        Ok(match &self.data {
            DataConfig::Synthetic {
                classes,
                per_class,
                side,
                noise,
            } => synthetic_glyphs(&SyntheticSpec {
                classes: *classes,
                per_class: *per_class,
                side: *side,
                noise: *noise,
                seed,
            }),
            DataConfig::Idx { images, labels } => load_idx(images, labels)?,
            DataConfig::Csv { path } => load_csv(path)?,
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count from `DAMTL_THREADS`, never more than the number of tasks.
/// Unset means one worker per task up to the available cores.
pub fn resolve_threads(env: Option<&str>, tasks: usize) -> Result<Option<usize>> {
    let requested = match env {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(CliError::Config(format!(
                    "DAMTL_THREADS must be a positive integer, got {v:?}"
                )))
            }
        },
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let n = requested.min(tasks.max(1));
    Ok((n > 1).then_some(n))
}
