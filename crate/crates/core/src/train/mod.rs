//! Patch-based training: sampling, augmentation, sparse-point loss and
//! AdamW updates.

mod augment;
mod checkpoint;
mod patch;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, flip_axis, rotate90, AugmentFlags};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use patch::{sample_patch, PatchSample};

use crate::autodiff::Graph;
use crate::data::{Case, DatasetStats, ImageVolume};
use crate::encoder::PATCH_MULTIPLE;
use crate::error::{Error, Result};
use crate::model::{stack_patches, ImplicitUNet, ModelConfig};
use crate::optim::{adamw_step, AdamWConfig, OptimState};
use crate::points::{sample_points, SamplerConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::kernels::{class_count, dice_ce_forward, DiceCeParts};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `(W, H, D)`, each a multiple of 16.
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub sampler: SamplerConfig,
    /// Probability that a patch is centered on foreground.
    pub fg_patch_fraction: f64,
    pub augment: AugmentFlags,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: [160, 160, 96],
            batch_size: 6,
            steps: 1000,
            optimizer: AdamWConfig::default(),
            sampler: SamplerConfig::default(),
            fg_patch_fraction: 1.0 / 3.0,
            augment: AugmentFlags::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&d| d == 0 || d % PATCH_MULTIPLE != 0) {
            return Err(Error::Config(format!(
                "patch size {:?} must be positive multiples of {PATCH_MULTIPLE}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_patch_fraction) {
            return Err(Error::Config(format!("fg_patch_fraction {} outside [0, 1]", self.fg_patch_fraction)));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.optimizer.lr)));
        }
        self.sampler.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub seconds: f64,
    pub points: usize,
}

/// Soft-Dice + cross-entropy over `n` points, without building a graph.
pub fn dice_ce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<DiceCeParts> {
    let (n, c) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::Shape(format!("{n} logit rows but {} targets", targets.len())));
    }
    dice_ce_forward(logits.data(), c, targets)
}

/// One optimization step on a batch of equally sized patches.
pub fn train_step<T: Scalar>(
    model: &mut ImplicitUNet<T>,
    batch: &[Case],
    opt: &mut OptimState<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let images: Vec<&ImageVolume> = batch.iter().map(|c| &c.image).collect();
    let input = stack_patches::<T>(&images)?;
    let classes = class_count(model.num_classes());

    let mut points = Vec::with_capacity(batch.len() * cfg.sampler.k);
    let mut targets = Vec::with_capacity(points.capacity());
    for (n, case) in batch.iter().enumerate() {
        if let Some(&t) = case.labels.data().iter().find(|&&t| usize::from(t) >= classes) {
            return Err(Error::InvalidArgument(format!("label {t} in patch {n} but model has {classes} classes")));
        }
        let pb = sample_points(&case.labels, &cfg.sampler, seed::derive(seed, &[n as u64]))?;
        points.extend(pb.voxel_coords.iter().map(|&p| (n, p)));
        targets.extend(pb.targets);
    }

    let mut g = Graph::new();
    let x = g.constant(input);
    let mv = model.bind(&mut g, true);
    let logits = mv.logits(&mut g, x, &points, true, seed::derive(seed, &[0xD0D0]))?;
    let (loss, parts) = g.dice_ce_loss(logits, &targets)?;
    if !parts.total().is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {} (dice {}, ce {})",
            opt.t + 1,
            parts.dice,
            parts.ce
        )));
    }
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor<T>> = mv.vars().iter().map(|&v| grads.get(v)).collect();
    adamw_step(&mut model.tensors_mut(), &grads, opt, &cfg.optimizer)?;

    Ok(StepMetrics {
        step: opt.t,
        loss: parts.total(),
        dice_loss: parts.dice,
        ce_loss: parts.ce,
        seconds: start.elapsed().as_secs_f64(),
        points: points.len(),
    })
}

/// Draws one augmented training batch from the dataset.
pub fn sample_batch(dataset: &[Case], cfg: &TrainConfig, seed: u64) -> Result<Vec<Case>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.batch_size)
        .map(|i| {
            let case = &dataset[rng.random_range(0..dataset.len())];
            let p = sample_patch(case, cfg.patch_size, cfg.fg_patch_fraction, seed::derive(seed, &[i as u64, 1]))?;
            let (image, labels) = augment(&p.image, &p.labels, &cfg.augment, seed::derive(seed, &[i as u64, 2]))?;
            Case::new(image, labels)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `metrics.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Normalization statistics recorded in checkpoints.
    pub intensity: Option<DatasetStats>,
}

pub struct FitOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<StepMetrics>,
}

pub fn fit<T: Scalar>(
    dataset: &[Case],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome<T>> {
    fit_with(dataset, model_cfg, cfg, opts, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with<T: Scalar>(
    dataset: &[Case],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &FitOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<FitOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot fit on an empty dataset".into()));
    }
    cfg.validate()?;
    let mut model = ImplicitUNet::<T>::init(model_cfg, cfg.seed)?;
    let mut opt = OptimState::zeros_like(model.named_tensors().into_iter().map(|(_, t)| t));
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let snapshot = |model: &ImplicitUNet<T>, opt: &OptimState<T>| Checkpoint {
        model: model.clone(),
        optimizer: Some(opt.clone()),
        step: opt.t,
        train_config: Some(cfg.clone()),
        intensity: opts.intensity,
    };

    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_seed = seed::derive(cfg.seed, &[0x57E9, step as u64]);
        let batch = sample_batch(dataset, cfg, seed::derive(step_seed, &[0]))?;
        let m = train_step(&mut model, &batch, &mut opt, cfg, seed::derive(step_seed, &[1]))?;
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&m);
        history.push(m);
        if let (Some(dir), true) = (&opts.out_dir, cfg.checkpoint_every > 0) {
            if (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                save_checkpoint(&snapshot(&model, &opt), dir.join(format!("checkpoint-{}.json", step + 1)))?;
            }
        }
    }
    let checkpoint = snapshot(&model, &opt);
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&checkpoint, dir.join("model.json"))?;
    }
    Ok(FitOutcome { checkpoint, history })
}

/// Path of the final checkpoint written by [`fit`] into `dir`.
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.json")
}
