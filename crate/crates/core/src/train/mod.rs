//! Supervised training for the story-QA and CIFAR-10 tasks: one autodiff
//! graph per sample, batch-mean gradients, AdamW, per-epoch validation.

pub mod metrics;
pub mod optim;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{Arch, Co4BlockConfig, InputSpec, Model, ModelInput, Mode};
use crate::data::babi::{self, split_of, Split, StoryConfig};
use crate::data::cifar::{self, CifarSet};
use crate::error::{param_err, Error, Result};
use crate::graph::Graph;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use metrics::{accuracy, argmax, cross_entropy, macro_f1};
pub use optim::{cosine_lr, AdamW, AdamWConfig, ScheduleKind, Scheduler};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const GRAD_NORMS_FILE: &str = "grad_norms.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Babi,
    Cifar,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Babi => "babi",
            Task::Cifar => "cifar",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "babi" => Ok(Task::Babi),
            "cifar" => Ok(Task::Cifar),
            other => Err(param_err(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(param_err(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub arch: Arch,
    pub block: Co4BlockConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Stories to generate, or the CIFAR-10 subset size.
    pub samples: usize,
    pub data_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub patch_size: usize,
    pub augment: bool,
    pub precision: Precision,
    /// Skip optimization and write the initial checkpoint only.
    pub dry_run: bool,
}

impl TrainConfig {
    pub fn babi() -> Self {
        let story = StoryConfig::default();
        Self {
            task: Task::Babi,
            arch: Arch::Co4,
            block: Co4BlockConfig {
                embed_dim: 32,
                latents: 8,
                heads: 1,
                layers: 1,
                dropout_p: 0.1,
                use_positional: true,
                num_classes: story.places.len(),
                ..Co4BlockConfig::default()
            },
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            lr_min: 0.0,
            optimizer: AdamWConfig::default(),
            schedule: ScheduleKind::Plateau,
            seed: 0,
            samples: 10_000,
            data_seed: 0,
            data_dir: None,
            patch_size: 4,
            augment: false,
            precision: Precision::F32,
            dry_run: false,
        }
    }

    pub fn cifar() -> Self {
        Self {
            task: Task::Cifar,
            block: Co4BlockConfig {
                embed_dim: 256,
                use_positional: false,
                num_classes: cifar::CLASSES,
                ..Co4BlockConfig::default()
            },
            epochs: 10,
            lr_min: 1e-5,
            schedule: ScheduleKind::Cosine,
            samples: 5_000,
            augment: true,
            ..Self::babi()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Babi => Self::babi(),
            Task::Cifar => Self::cifar(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.epochs == 0 && !self.dry_run {
            return Err(param_err("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(param_err("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(param_err(format!("lr must be positive, got {}", self.lr)));
        }
        if self.samples == 0 {
            return Err(param_err("samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Example {
    Tokens(Vec<usize>),
    /// `[H, W, C]` image in `[0, 1]`.
    Image(Tensor<f64>),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub index: u64,
    pub example: Example,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub input: InputSpec,
    pub num_classes: usize,
    pub patch_size: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn split_samples(samples: impl Iterator<Item = Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.partition(|s| split_of(s.index) == Split::Train)
}

impl TaskData {
    pub fn babi(story: &StoryConfig, count: usize) -> Result<Self> {
        let (vocab, stories) = babi::generate(story, count as u64)?;
        let (train, val) = split_samples(stories.into_iter().map(|s| Sample {
            index: s.index,
            example: Example::Tokens(s.token_ids),
            label: s.answer,
        }));
        Ok(Self {
            input: InputSpec::Tokens {
                vocab: vocab.len(),
                seq_len: story.max_tokens,
            },
            num_classes: story.places.len(),
            patch_size: 0,
            train,
            val,
        })
    }

    /// The first `subset` images of `set`, split 80/20 by index hash.
    pub fn cifar(set: CifarSet, subset: usize, patch_size: usize) -> Result<Self> {
        let first = set
            .images
            .first()
            .ok_or_else(|| Error::Format("empty CIFAR-10 set".into()))?;
        let (h, w, c) = (first.shape()[0], first.shape()[1], first.shape()[2]);
        let patches = cifar::extract_patches(first, patch_size)?.dims2();
        let (train, val) = split_samples(
            set.images
                .into_iter()
                .zip(set.labels)
                .take(subset)
                .enumerate()
                .map(|(i, (img, label))| Sample {
                    index: i as u64,
                    example: Example::Image(img),
                    label,
                }),
        );
        debug_assert_eq!(patches.1, patch_size * patch_size * c);
        debug_assert_eq!(patches.0, (h / patch_size) * (w / patch_size));
        Ok(Self {
            input: InputSpec::Patches {
                patch_dim: patches.1,
                num_patches: patches.0,
            },
            num_classes: cifar::CLASSES,
            patch_size,
            train,
            val,
        })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        match cfg.task {
            Task::Babi => Self::babi(&StoryConfig::with_seed(cfg.data_seed), cfg.samples),
            Task::Cifar => {
                let dir = cfg
                    .data_dir
                    .as_ref()
                    .ok_or_else(|| param_err("the cifar task needs a data directory"))?;
                Self::cifar(cifar::read_training_dir(dir)?, cfg.samples, cfg.patch_size)
            }
        }
    }

    /// Model input for `s`; `augment` carries the per-epoch augmentation seed.
    pub fn model_input<T: Scalar>(&self, s: &Sample, augment: Option<u64>) -> Result<ModelInput<T>> {
        match &s.example {
            Example::Tokens(ids) => Ok(ModelInput::Tokens(ids.clone())),
            Example::Image(img) => {
                let img = match augment {
                    Some(seed) => cifar::augment(img, seed, s.index)?,
                    None => img.clone(),
                };
                Ok(ModelInput::Patches(cifar::extract_patches(&img, self.patch_size)?.cast()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub macro_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub preds: Vec<usize>,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &TaskData, samples: &[Sample]) -> Result<EvalResult> {
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.predict(&data.model_input(s, None)?)?;
        loss += cross_entropy(&logits, &[s.label])?;
        preds.push(argmax(logits.data()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(EvalResult {
        loss: loss / samples.len().max(1) as f64,
        accuracy: accuracy(&preds, &labels)?,
        macro_f1: macro_f1(&preds, &labels, data.num_classes)?,
        preds,
    })
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: Vec<MetricsRow>,
    /// Global L2 norm of every batch-mean gradient, in step order.
    pub grad_norms: Vec<f64>,
    pub wall_ms: Vec<u128>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains from a seeded initialization; `on_epoch` sees every row as it is
/// produced together with the epoch's wall time.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &TaskData,
    mut on_epoch: impl FnMut(&MetricsRow, u128) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(param_err("training and validation splits must both be non-empty"));
    }
    let mut block = cfg.block.clone();
    block.num_classes = data.num_classes;
    let mut model = Model::<T>::new(block, cfg.arch, data.input, cfg.seed)?;
    let mut out = TrainOutcome {
        model: model.clone(),
        history: Vec::new(),
        grad_norms: Vec::new(),
        wall_ms: Vec::new(),
    };
    if cfg.dry_run {
        return Ok(out);
    }

    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let mut sched = Scheduler::new(cfg.schedule, cfg.lr, cfg.lr_min, cfg.epochs)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr(epoch);
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(2 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let aug = cfg.augment.then(|| epoch_seed(cfg.seed, epoch));

        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Vec<T>> = model
                .params()
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect();
            for &i in batch {
                let s = &data.train[i];
                let input = data.model_input::<T>(s, aug)?;
                let diverged = |e: Error| match e {
                    Error::NonFinite(op) => Error::Diverged(format!(
                        "epoch {epoch} step {step} sample {}: non-finite value in {op}",
                        s.index
                    )),
                    other => other,
                };
                let mut g = Graph::new();
                let b = model.params().bind(&mut g);
                let logits = model
                    .forward(&mut g, &b, &input, &mut Mode::Train(&mut dropout_rng))
                    .map_err(diverged)?;
                let loss = g.cross_entropy(logits, &[s.label]).map_err(diverged)?;
                loss_sum += g.value(loss).item()?.to_f64_lossy();
                let grads = g.backward(loss).map_err(diverged)?;
                for (a, &v) in acc.iter_mut().zip(b.vars()) {
                    if let Some(gv) = grads.slice(v) {
                        a.iter_mut().zip(gv).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            let scale = T::of(1.0 / batch.len() as f64);
            let mut sq = 0.0;
            for a in acc.iter_mut() {
                for x in a.iter_mut() {
                    *x *= scale;
                    sq += x.to_f64_lossy().powi(2);
                }
            }
            if !sq.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch} step {step}: gradient norm {sq}")));
            }
            out.grad_norms.push(sq.sqrt());
            opt.step(model.params_mut(), &acc, lr)?;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: train loss {train_loss}")));
        }
        let eval = evaluate(&model, data, &data.val)?;
        sched.observe(eval.loss);
        let row = MetricsRow {
            epoch,
            train_loss,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
            macro_f1: eval.macro_f1,
            lr,
        };
        let ms = start.elapsed().as_millis();
        on_epoch(&row, ms)?;
        out.history.push(row);
        out.wall_ms.push(ms);
    }
    out.model = model;
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    input: InputSpec,
    num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub history: Vec<MetricsRow>,
    pub grad_norms: Vec<f64>,
    pub num_parameters: usize,
}

/// Loads data, trains, and writes the run directory:
/// `config.json`, `metrics.csv`, `timings.csv`, `grad_norms.csv` and
/// `checkpoint.bin`.
pub fn run(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let data = TaskData::load(cfg)?;
    run_with_data(cfg, &data, out_dir)
}

pub fn run_with_data(cfg: &TrainConfig, data: &TaskData, out_dir: &Path) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, data, out_dir),
        Precision::F64 => run_typed::<f64>(cfg, data, out_dir),
    }
}

fn run_typed<T: Scalar>(cfg: &TrainConfig, data: &TaskData, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;

    let mut metrics = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out_dir.join(METRICS_FILE))?;
    metrics.write_record(["epoch", "train_loss", "val_loss", "val_accuracy", "macro_f1", "lr"])?;
    metrics.flush()?;
    let mut timings = csv::Writer::from_path(out_dir.join(TIMINGS_FILE))?;
    timings.write_record(["epoch", "wall_ms"])?;

    let outcome = train::<T>(cfg, data, |row, ms| {
        metrics.serialize(row)?;
        metrics.flush()?;
        timings.write_record([row.epoch.to_string(), ms.to_string()])?;
        timings.flush()?;
        Ok(())
    })?;

    let mut norms = fs::File::create(out_dir.join(GRAD_NORMS_FILE))?;
    writeln!(norms, "step,grad_norm")?;
    for (i, n) in outcome.grad_norms.iter().enumerate() {
        writeln!(norms, "{i},{n}")?;
    }

    let meta = CheckpointMeta {
        config: cfg.clone(),
        input: data.input,
        num_classes: data.num_classes,
    };
    outcome
        .model
        .params()
        .save(out_dir.join(CHECKPOINT_FILE), serde_json::to_value(&meta)?)?;
    Ok(RunSummary {
        history: outcome.history,
        grad_norms: outcome.grad_norms,
        num_parameters: outcome.model.num_parameters(),
    })
}

/// Rebuilds the trained model of a run directory from its checkpoint.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainConfig, Model<T>)> {
    let (meta, params) = ParamSet::<T>::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    let mut block = meta.config.block.clone();
    block.num_classes = meta.num_classes;
    let mut model = Model::new(block, meta.config.arch, meta.input, meta.config.seed)?;
    model.params_mut().load_from(&params)?;
    Ok((meta.config, model))
}

/// Ratio of the largest to the median gradient norm.
pub fn spike_ratio(norms: &[f64]) -> Option<f64> {
    if norms.is_empty() {
        return None;
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    Some(sorted[sorted.len() - 1] / median)
}
