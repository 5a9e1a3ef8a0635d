use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use imunet::bench::{bench_compare, BenchReport};
use imunet::data::{dice_metric, normalize_dataset, synth_generate, write_volume};
use imunet::inference::segment;
use imunet::train::{fit_with, final_checkpoint_path, load_checkpoint, FitOptions};
use imunet::{Case, Checkpoint32, DatasetStats, ImageVolume, InferenceConfig, LabelVolume, TrainConfig};
use serde::Serialize;

use crate::config::{self, FileConfig};
use crate::dataset::{self, LABELS_SUFFIX, PRED_SUFFIX};
use crate::{BenchArgs, Cli, Command, EvalArgs, GenArgs, InferFlags, PredictArgs, SweepArgs, SweepParam, TrainArgs, TrainFlags};

pub fn run(cli: Cli) -> Result<()> {
    let mut file = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        file.seed = Some(seed);
    }
    match cli.command {
        Command::Gen(a) => gen(&file, a),
        Command::Train(a) => train(&file, a),
        Command::Predict(a) => predict(&file, a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(&file, a),
        Command::Sweep(a) => sweep(&file, a),
    }
}

/// Writes records as JSON lines to `out`, or stdout.
fn emit<T: Serialize>(out: Option<&Path>, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

fn gen(file: &FileConfig, a: GenArgs) -> Result<()> {
    let mut cfg = file.synth.clone();
    if let Some(n) = a.num {
        cfg.num_volumes = n;
    }
    if let Some(d) = a.dims {
        cfg.dims = d;
    }
    if let Some(c) = a.classes {
        cfg.num_classes = c;
    }
    if let Some(s) = file.seed {
        cfg.seed = s;
    }
    let cases = synth_generate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, c) in cases.iter().enumerate() {
        dataset::write_case(&a.out, &dataset::case_name(i), c)?;
    }
    eprintln!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn train_config(file: &FileConfig, f: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = file.train.clone();
    if let Some(v) = f.patch {
        cfg.patch_size = v;
    }
    if let Some(v) = f.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = f.k {
        cfg.sampler.k = v;
    }
    if let Some(v) = f.alpha {
        config::check_fraction("alpha", v)?;
        cfg.sampler.alpha = v;
    }
    if let Some(v) = f.sigma {
        cfg.sampler.sigma = v;
    }
    if f.no_augment {
        cfg.augment = imunet::train::AugmentFlags::none();
    }
    if let Some(s) = file.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_spec(file: &FileConfig, f: &TrainFlags) -> config::ModelSpec {
    let mut spec = file.model.clone();
    if let Some(c) = f.channels {
        spec.block_channels = c;
    }
    if let Some(h) = f.hidden {
        spec.hidden = h;
    }
    spec
}

/// Normalized training cases, their statistics and the class count.
fn prepare_training(dir: &Path) -> Result<(Vec<Case>, DatasetStats, usize)> {
    let cases = dataset::load_cases(dir)?;
    let images: Vec<ImageVolume> = cases.iter().map(|(_, c)| c.image.clone()).collect();
    let (norm, stats) = normalize_dataset(&images)?;
    let classes = cases.iter().flat_map(|(_, c)| c.labels.data().iter().copied()).max().unwrap_or(0) as usize + 1;
    let cases = norm.into_iter().zip(cases).map(|(img, (_, c))| Case::new(img, c.labels)).collect::<Result<_, _>>()?;
    Ok((cases, stats, classes.max(2)))
}

fn run_training(
    data: &Path,
    out: Option<PathBuf>,
    spec: &config::ModelSpec,
    cfg: &TrainConfig,
) -> Result<(Checkpoint32, Option<f64>, f64)> {
    let (cases, stats, classes) = prepare_training(data)?;
    let model_cfg = spec.build(classes);
    let opts = FitOptions { out_dir: out, intensity: Some(stats) };
    let every = (cfg.steps / 10).max(1) as u64;
    let start = Instant::now();
    let outcome = fit_with::<f32>(&cases, &model_cfg, cfg, &opts, |m| {
        if m.step % every == 0 {
            eprintln!("step {:>6} loss {:.4} (dice {:.4}, ce {:.4})", m.step, m.loss, m.dice_loss, m.ce_loss);
        }
    })?;
    let last = outcome.history.last().map(|m| m.loss);
    Ok((outcome.checkpoint, last, start.elapsed().as_secs_f64()))
}

fn train(file: &FileConfig, a: TrainArgs) -> Result<()> {
    let cfg = train_config(file, &a.flags)?;
    let spec = model_spec(file, &a.flags);
    let (_, _, secs) = run_training(&a.data, Some(a.out.clone()), &spec, &cfg)?;
    eprintln!("trained {} steps in {secs:.1}s; checkpoint {}", cfg.steps, final_checkpoint_path(&a.out).display());
    Ok(())
}

fn inference_config(file: &FileConfig, f: &InferFlags) -> Result<InferenceConfig> {
    let mut cfg = file.inference.clone();
    if let Some(s) = f.spacing {
        cfg.spacing = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Checkpoint32> {
    load_checkpoint::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn patch_for(ckpt: &Checkpoint32, f: &InferFlags) -> Result<[usize; 3]> {
    f.patch
        .or_else(|| ckpt.train_config.as_ref().map(|t| t.patch_size))
        .context("checkpoint has no training config; pass --patch")
}

fn normalized(ckpt: &Checkpoint32, image: &ImageVolume) -> ImageVolume {
    match &ckpt.intensity {
        Some(stats) => stats.apply(image),
        None => image.clone(),
    }
}

#[derive(Serialize)]
struct PredictRecord {
    case: String,
    dims: [usize; 3],
    spacing: usize,
    broad_points: usize,
    refinement_points: usize,
    total_voxels: usize,
    refinement_skipped: usize,
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dense_agreement_dice: Option<Vec<f64>>,
}

fn predict(file: &FileConfig, a: PredictArgs) -> Result<()> {
    let ckpt = load_model(&a.checkpoint)?;
    let cfg = inference_config(file, &a.infer)?;
    let patch = patch_for(&ckpt, &a.infer)?;
    let jobs: Vec<(String, PathBuf, PathBuf)> = match (&a.input, &a.data) {
        (Some(input), _) => vec![(input.display().to_string(), input.clone(), a.out.clone())],
        (None, Some(dir)) => {
            std::fs::create_dir_all(&a.out)?;
            dataset::list_cases(dir)?
                .into_iter()
                .map(|c| {
                    let src = dataset::path(dir, &c, dataset::IMAGE_SUFFIX);
                    let dst = dataset::path(&a.out, &c, PRED_SUFFIX);
                    (c, src, dst)
                })
                .collect()
        }
        (None, None) => bail!("pass --input or --data"),
    };
    let classes = ckpt.model.num_classes().max(2);
    let mut records = Vec::new();
    for (case, src, dst) in jobs {
        let image: ImageVolume = imunet::data::read_volume(&src)?;
        let img = normalized(&ckpt, &image);
        let start = Instant::now();
        let (labels, _, stats) = segment(&ckpt.model, &img, patch, &cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        let dense_agreement_dice = if a.compare_dense {
            let dense_cfg = InferenceConfig { spacing: 1, ..cfg.clone() };
            let (dense, _, _) = segment(&ckpt.model, &img, patch, &dense_cfg)?;
            Some((1..classes).map(|c| dice_metric(&labels, &dense, c as u8)).collect::<Result<_, _>>()?)
        } else {
            None
        };
        write_volume(&dst, &labels.with_spacing(image.spacing())?)?;
        records.push(PredictRecord {
            case,
            dims: image.dims(),
            spacing: cfg.spacing,
            broad_points: stats.broad_points,
            refinement_points: stats.refinement_points,
            total_voxels: stats.total_voxels,
            refinement_skipped: stats.refinement_skipped,
            seconds,
            dense_agreement_dice,
        });
    }
    emit(None, &records)
}

#[derive(Serialize)]
struct EvalRecord {
    case: String,
    /// Dice for classes 1, 2, ...
    dice_per_class: Vec<f64>,
    mean_dice: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut pairs: Vec<(String, LabelVolume, LabelVolume)> = Vec::new();
    for case in dataset::list_cases(&a.data)? {
        let pred_path = dataset::path(&a.pred, &case, PRED_SUFFIX);
        if !pred_path.exists() {
            bail!("missing prediction {}", pred_path.display());
        }
        let gt = dataset::read_labels(&a.data, &case, LABELS_SUFFIX)?;
        let pred = dataset::read_labels(&a.pred, &case, PRED_SUFFIX)?;
        pairs.push((case, pred, gt));
    }
    let classes = pairs
        .iter()
        .flat_map(|(_, p, g)| p.data().iter().chain(g.data()).copied())
        .max()
        .unwrap_or(0)
        .max(1) as usize
        + 1;
    let mut records = Vec::new();
    for (case, pred, gt) in &pairs {
        let dice: Vec<f64> = (1..classes).map(|c| dice_metric(pred, gt, c as u8)).collect::<Result<_, _>>()?;
        let mean = dice.iter().sum::<f64>() / dice.len() as f64;
        records.push(EvalRecord { case: case.clone(), dice_per_class: dice, mean_dice: mean });
    }
    let n = records.len() as f64;
    let per_class: Vec<f64> =
        (0..classes - 1).map(|c| records.iter().map(|r| r.dice_per_class[c]).sum::<f64>() / n).collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    records.push(EvalRecord { case: "mean".into(), dice_per_class: per_class, mean_dice: mean });
    emit(a.out.as_deref(), &records)
}

fn load_images(dir: &Path, ckpt: &Checkpoint32) -> Result<Vec<(String, ImageVolume)>> {
    dataset::list_cases(dir)?
        .into_iter()
        .map(|c| {
            let img = dataset::read_image(dir, &c)?;
            Ok((c, normalized(ckpt, &img)))
        })
        .collect()
}

fn run_bench(ckpt: &Checkpoint32, dir: &Path, patch: [usize; 3], cfg: &InferenceConfig) -> Result<BenchReport> {
    let volumes = load_images(dir, ckpt)?;
    Ok(bench_compare(&ckpt.model, &volumes, patch, cfg)?)
}

fn bench(file: &FileConfig, a: BenchArgs) -> Result<()> {
    let ckpt = load_model(&a.checkpoint)?;
    let cfg = inference_config(file, &a.infer)?;
    let report = run_bench(&ckpt, &a.data, patch_for(&ckpt, &a.infer)?, &cfg)?;
    eprintln!(
        "mean sparse/dense evaluation ratio {:.4}; minimum Dice(sparse, dense) {:.4}",
        report.mean_ratio(),
        report.min_dice()
    );
    emit(a.out.as_deref(), &report.records)
}

#[derive(Serialize)]
struct SweepRecord {
    param: &'static str,
    value: f64,
    /// Mean Dice against ground truth for classes 1, 2, ...
    dice_per_class: Vec<f64>,
    mean_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    evaluation_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_dense_agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
    seconds: f64,
}

/// Mean per-class Dice of the sparse pipeline against the labels in `dir`.
fn validation_dice(ckpt: &Checkpoint32, dir: &Path, patch: [usize; 3], cfg: &InferenceConfig) -> Result<Vec<f64>> {
    let cases = dataset::load_cases(dir)?;
    let classes = ckpt.model.num_classes().max(2);
    let mut sums = vec![0.0; classes - 1];
    for (_, c) in &cases {
        let (labels, _, _) = segment(&ckpt.model, &normalized(ckpt, &c.image), patch, cfg)?;
        for (k, s) in sums.iter_mut().enumerate() {
            *s += dice_metric(&labels, &c.labels, (k + 1) as u8)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / cases.len() as f64).collect())
}

fn sweep(file: &FileConfig, a: SweepArgs) -> Result<()> {
    let name = match a.param {
        SweepParam::K => "k",
        SweepParam::Alpha => "alpha",
        SweepParam::Sigma => "sigma",
        SweepParam::Spacing => "spacing",
    };
    let mut infer = file.inference.clone();
    if let Some(s) = a.spacing {
        infer.spacing = s;
    }
    let mut records = Vec::new();
    for &value in &a.values {
        let start = Instant::now();
        let mut rec = SweepRecord {
            param: name,
            value,
            dice_per_class: Vec::new(),
            mean_dice: 0.0,
            evaluation_ratio: None,
            min_dense_agreement: None,
            final_loss: None,
            seconds: 0.0,
        };
        if a.param == SweepParam::Spacing {
            if value < 1.0 || value.fract() != 0.0 {
                bail!("spacing values must be positive integers, got {value}");
            }
            let path = a.checkpoint.as_ref().context("spacing sweeps need --checkpoint")?;
            let ckpt = load_model(path)?;
            let patch = patch_for(&ckpt, &InferFlags { spacing: None, patch: a.train.patch })?;
            let cfg = InferenceConfig { spacing: value as usize, ..infer.clone() };
            cfg.validate()?;
            let report = run_bench(&ckpt, &a.data, patch, &cfg)?;
            rec.evaluation_ratio = Some(report.mean_ratio());
            rec.min_dense_agreement = Some(report.min_dice());
            rec.dice_per_class = validation_dice(&ckpt, &a.data, patch, &cfg)?;
        } else {
            let mut flags = a.train.clone();
            match a.param {
                SweepParam::K => {
                    if value < 1.0 || value.fract() != 0.0 {
                        bail!("k values must be positive integers, got {value}");
                    }
                    flags.k = Some(value as usize);
                }
                SweepParam::Alpha => flags.alpha = Some(value),
                _ => flags.sigma = Some(value),
            }
            let cfg = train_config(file, &flags)?;
            let spec = model_spec(file, &flags);
            let (ckpt, last, _) = run_training(&a.data, None, &spec, &cfg)?;
            rec.final_loss = last;
            let val = a.val.as_deref().unwrap_or(&a.data);
            rec.dice_per_class = validation_dice(&ckpt, val, cfg.patch_size, &infer)?;
        }
        rec.mean_dice = rec.dice_per_class.iter().sum::<f64>() / rec.dice_per_class.len().max(1) as f64;
        rec.seconds = start.elapsed().as_secs_f64();
        eprintln!("{name} = {value}: mean Dice {:.4}", rec.mean_dice);
        records.push(rec);
    }
    emit(a.out.as_deref(), &records)
}
