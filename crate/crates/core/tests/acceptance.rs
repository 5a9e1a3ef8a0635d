//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::time::Instant;

use common::{ball_patch, chain_case, primitive_cases, sparse_dense_consistency, TOLERANCE};
use imunet::data::{dice_metric, normalize_dataset, sphere_phantom, synth_generate, DatasetStats, SynthConfig};
use imunet::encoder::PyramidVars;
use imunet::inference::{
    broad_grid, postprocess, predict_patch, segment, sliding_window, PatchPredictor, PredictionStats, ProbVolume,
};
use imunet::points::{sample_points, Provenance};
use imunet::train::{dice_ce_loss, fit_with, load_checkpoint, save_checkpoint, FitOptions};
use imunet::{
    AdamWConfig, Case, FeaturePyramid, Graph, ImageVolume, ImplicitUNet, InferenceConfig, LabelVolume, Model32,
    ModelConfig, SamplerConfig, Tensor, TrainConfig,
};
use rand::Rng;

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn run(results: &mut Vec<bool>, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2}  {name:<34} {verdict}  {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    results.push(pass);
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let cases = primitive_cases();
    let n = cases.len();
    for case in cases.iter().chain(std::iter::once(&chain_case())) {
        let r = case.run().map_err(err)?;
        if r.max_relative_error >= worst.0 {
            worst = (r.max_relative_error, case.name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst.0 < TOLERANCE && secs < 120.0,
        format!("{n} primitives + full chain, max rel err {:.2e} ({}), {secs:.1}s < 120s", worst.0, worst.1),
    ))
}

fn gather_oracle() -> Outcome {
    let mut r = common::rng(2024);
    let instances = 120;
    let mut checked = 0;
    for _ in 0..instances {
        let batch = r.random_range(1..3);
        let dims: [usize; 3] = std::array::from_fn(|_| 16 * r.random_range(1..3));
        let maps: Vec<Tensor<f32>> = (1..=4)
            .map(|b| {
                let c = r.random_range(1..4);
                let shape = [batch, c, dims[2] >> b, dims[1] >> b, dims[0] >> b];
                Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r)
            })
            .collect();
        let pyramid = FeaturePyramid { maps: maps.clone(), patch_dims: dims };
        let points: Vec<(usize, [f64; 3])> = (0..r.random_range(1..40))
            .map(|_| {
                let p: [f64; 3] = std::array::from_fn(|a| r.random_range(0.0..dims[a] as f64));
                (r.random_range(0..batch), p)
            })
            .collect();
        // brute force: scale the coordinate down and read the map directly
        let mut expected = Vec::new();
        for &(n, p) in &points {
            for (b, m) in maps.iter().enumerate() {
                let s = m.shape();
                let cell: [usize; 3] = std::array::from_fn(|a| (p[a] / f64::from(1u32 << (b + 1))).floor() as usize);
                for ch in 0..s[1] {
                    let i = (((n * s[1] + ch) * s[2] + cell[2]) * s[3] + cell[1]) * s[4] + cell[0];
                    expected.push(m.data()[i]);
                }
            }
        }
        let direct = pyramid.gather_batched(&points).map_err(err)?;
        let mut g = Graph::<f32>::new();
        let vars: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let pv = PyramidVars { maps: [vars[0], vars[1], vars[2], vars[3]], patch_dims: dims };
        let node = pv.gather(&mut g, &points).map_err(err)?;
        if direct.data() != &expected[..] || g.value(node).data() != &expected[..] {
            return Ok((false, format!("mismatch on instance {checked}")));
        }
        checked += 1;
    }
    Ok((true, format!("{checked} random instances exact (table and graph paths)")))
}

fn mesh_density() -> Outcome {
    let mut r = common::rng(3);
    for _ in 0..500 {
        let dims: [usize; 3] = std::array::from_fn(|_| r.random_range(1..70));
        let s = r.random_range(1..10);
        let want: usize = dims.iter().map(|&d| (d + s - 1) / s).product();
        if broad_grid(dims, s).len() != want {
            return Ok((false, format!("{dims:?} s={s}")));
        }
    }
    let n = broad_grid([160, 160, 96], 4).len();
    Ok((
        n == 38_400 && n * 64 == 160 * 160 * 96,
        format!("500 random (dims, s) exact; (160,160,96) s=4 -> {n} = total/64"),
    ))
}

fn structural_consistency() -> Outcome {
    let mut refined = 0;
    let mut unrefined = 0;
    let mut s1_ok = 0;
    let instances = 8;
    for seed in 0..instances {
        let classes = [1, 2, 3][seed as usize % 3];
        let cfg = ModelConfig::with([2, 4, 4, 8], 16, classes);
        let model = ImplicitUNet::<f32>::init(&cfg, seed).map_err(err)?;
        let dims = [[16, 16, 16], [32, 16, 16], [16, 32, 32]][seed as usize % 3];
        let c = sparse_dense_consistency(&model, &ball_patch(dims, seed + 100), 4).map_err(err)?;
        if c.mismatches != 0 {
            return Ok((false, format!("{} voxel mismatches on model {seed}", c.mismatches)));
        }
        s1_ok += usize::from(c.s1_bit_identical);
        refined += c.refined;
        unrefined += c.unrefined;
    }
    Ok((
        s1_ok == instances as usize && refined > 0 && unrefined > 0,
        format!(
            "{instances} random models: s=1 bit-identical {s1_ok}/{instances}; s=4 {refined} band voxels = dense, \
             {unrefined} others = nearest broad"
        ),
    ))
}

fn sampler_statistics() -> Outcome {
    let mut labels = LabelVolume::filled([64, 32, 32], 0);
    for i in 0..labels.len() {
        if labels.coords(i)[0] >= 32 {
            labels.data_mut()[i] = 1;
        }
    }
    // exact fractions: alpha = p/q, boundary count = ceil(k p / q)
    for &(p, q) in &[(1usize, 2usize), (1, 3), (3, 10), (0, 1), (1, 1), (7, 8)] {
        for &k in &[1usize, 7, 100, 2048, 30_000] {
            let cfg = SamplerConfig { k, alpha: p as f64 / q as f64, sigma: 2.0 };
            let batch = sample_points(&labels, &cfg, k as u64).map_err(err)?;
            let n = batch.provenance.iter().filter(|&&v| v == Provenance::Boundary).count();
            if n != (k * p).div_ceil(q) || batch.len() != k {
                return Ok((false, format!("k={k} alpha={p}/{q}: {n} boundary points")));
            }
        }
    }
    let sigma = 3.0;
    let batch = sample_points(&labels, &SamplerConfig { k: 40_000, alpha: 0.5, sigma }, 7).map_err(err)?;
    // boundary voxels sit at x = 31 and x = 32 in equal numbers
    let xs: Vec<f64> = batch
        .voxel_coords
        .iter()
        .zip(&batch.provenance)
        .filter(|(_, &p)| p == Provenance::Boundary)
        .map(|(c, _)| c[0] - 31.5)
        .collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let displacement_std = (var - 0.25).max(0.0).sqrt();
    let rel = (displacement_std - sigma).abs() / sigma;
    Ok((
        rel < 0.10,
        format!("30 (k, alpha) counts exact; planar boundary displacement std {displacement_std:.3} vs sigma {sigma} ({:.1}% off, n={})", rel * 100.0, xs.len()),
    ))
}

fn loss_analytics() -> Outcome {
    let targets = [0, 1, 1, 0, 1, 0, 0, 1];
    let uniform = dice_ce_loss(&Tensor::<f64>::zeros(&[8, 2]), &targets).map_err(err)?;
    let ce_err = (uniform.ce - std::f64::consts::LN_2).abs();
    let sat: Vec<f32> = targets.iter().flat_map(|&t| if t == 1 { [0.0, 20.0] } else { [20.0, 0.0] }).collect();
    let mut g = Graph::<f32>::new();
    let logits = g.param(Tensor::from_vec(&[8, 2], sat).map_err(err)?);
    let (_, parts) = g.dice_ce_loss(logits, &targets).map_err(err)?;
    Ok((
        ce_err <= 1e-6 && parts.total() < 1e-4,
        format!("uniform CE - ln 2 = {ce_err:.1e}; saturated total {:.2e}", parts.total()),
    ))
}

struct Constant(Vec<f32>);

impl PatchPredictor for Constant {
    fn channels(&self) -> usize {
        self.0.len()
    }

    fn predict(&self, patch: &ImageVolume) -> imunet::Result<(ProbVolume, PredictionStats)> {
        let data = self.0.iter().copied().cycle().take(patch.len() * self.0.len()).collect();
        Ok((ProbVolume::new(patch.dims(), self.0.len(), data)?, PredictionStats::default()))
    }
}

fn sliding_partition() -> Outcome {
    let mut r = common::rng(10);
    let mut worst = 0.0f32;
    let trials = 60;
    for _ in 0..trials {
        let dims: [usize; 3] = std::array::from_fn(|_| r.random_range(1..48));
        let patch: [usize; 3] = std::array::from_fn(|_| r.random_range(1..24));
        let overlap = r.random_range(0.0..0.9);
        let values = vec![r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)];
        let cfg = InferenceConfig { window_overlap: overlap, ..Default::default() };
        let (out, _) =
            sliding_window(&Constant(values.clone()), &ImageVolume::filled(dims, 0.0), patch, &cfg).map_err(err)?;
        for v in out.data.chunks(3) {
            for (a, b) in v.iter().zip(&values) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst <= 1e-6, format!("{trials} random volume/patch/overlap combos, max deviation {worst:.1e}")))
}

struct Desk {
    val: Vec<Case>,
    stats: DatasetStats,
    small: Model32,
    small_ckpt: imunet::Checkpoint32,
    large: Model32,
    train_seconds: f64,
}

fn desk_train_cfg(patch: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        patch_size: [patch; 3],
        batch_size: 2,
        steps,
        sampler: SamplerConfig { k: 2048, alpha: 0.5, sigma: 3.0 },
        optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
        ..Default::default()
    }
}

fn train_desk_models() -> Result<Desk, String> {
    let start = Instant::now();
    let train = synth_generate(&SynthConfig { num_volumes: 24, seed: 1, ..Default::default() }).map_err(err)?;
    let val = synth_generate(&SynthConfig { num_volumes: 8, seed: 99, ..Default::default() }).map_err(err)?;
    let images: Vec<ImageVolume> = train.iter().map(|c| c.image.clone()).collect();
    let (norm, stats) = normalize_dataset(&images).map_err(err)?;
    let train: Vec<Case> =
        norm.into_iter().zip(&train).map(|(i, c)| Case::new(i, c.labels.clone())).collect::<Result<_, _>>().map_err(err)?;
    let model_cfg = ModelConfig::with([8, 16, 32, 64], 128, 2);
    let progress = |tag: &'static str| {
        move |m: &imunet::StepMetrics| {
            if m.step % 250 == 0 {
                println!("  [{tag}] step {:>4} loss {:.4}", m.step, m.loss);
            }
        }
    };
    let opts = FitOptions { out_dir: None, intensity: Some(stats) };
    let small = fit_with::<f32>(&train, &model_cfg, &desk_train_cfg(32, 1000), &opts, progress("32^3 patches"))
        .map_err(err)?;
    let large = fit_with::<f32>(&train, &model_cfg, &desk_train_cfg(64, 600), &opts, progress("64^3 patches"))
        .map_err(err)?;
    Ok(Desk {
        val,
        stats,
        small: small.checkpoint.model.clone(),
        small_ckpt: small.checkpoint,
        large: large.checkpoint.model,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn sparse_matches_dense(desk: &Desk) -> Outcome {
    let sparse_cfg = InferenceConfig::default();
    let dense_cfg = InferenceConfig { spacing: 1, ..Default::default() };
    let mut min_dice = 1.0f64;
    // sliding-window agreement on held-out blob volumes
    for case in &desk.val {
        let img = desk.stats.apply(&case.image);
        let (a, _, _) = segment(&desk.small, &img, [32; 3], &sparse_cfg).map_err(err)?;
        let (b, _, _) = segment(&desk.small, &img, [32; 3], &dense_cfg).map_err(err)?;
        min_dice = min_dice.min(dice_metric(&a, &b, 1).map_err(err)?);
    }
    // whole-patch sphere phantoms: agreement and evaluation budget
    let mut max_frac = 0.0f64;
    for i in 0..8u64 {
        let radius = 7.0 + 0.35 * i as f64;
        let center = [28.0 + i as f64, 33.0 - 0.5 * i as f64, 30.0 + 0.75 * i as f64];
        let case = sphere_phantom([64; 3], center, radius, 1.0, 0.25, 500 + i).map_err(err)?;
        let img = desk.stats.apply(&case.image);
        let (ps, st) = predict_patch(&desk.large, &img, &sparse_cfg).map_err(err)?;
        let (pd, _) = predict_patch(&desk.large, &img, &dense_cfg).map_err(err)?;
        let a = postprocess(&ps, 3).map_err(err)?;
        let b = postprocess(&pd, 3).map_err(err)?;
        min_dice = min_dice.min(dice_metric(&a, &b, 1).map_err(err)?);
        max_frac = max_frac.max(st.evaluations() as f64 / st.total_voxels as f64);
    }
    Ok((
        min_dice >= 0.99 && max_frac <= 0.10,
        format!(
            "8 validation volumes + 8 sphere phantoms: min Dice(s=4, s=1) {min_dice:.4}; max sparse evaluations {:.2}% of voxels",
            max_frac * 100.0
        ),
    ))
}

fn end_to_end(desk: &Desk) -> Outcome {
    let mut dice = Vec::new();
    for case in &desk.val {
        let img = desk.stats.apply(&case.image);
        let (labels, _, _) = segment(&desk.small, &img, [32; 3], &InferenceConfig::default()).map_err(err)?;
        dice.push(dice_metric(&labels, &case.labels, 1).map_err(err)?);
    }
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    Ok((
        mean >= 0.85 && desk.train_seconds <= 3600.0,
        format!(
            "24 train / 8 val at 64^3, patch 32^3, 1000 steps: mean val Dice {mean:.4} (min {:.4}); training {:.0}s",
            dice.iter().copied().fold(1.0, f64::min),
            desk.train_seconds
        ),
    ))
}

fn checkpoint_roundtrip(desk: &Desk) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("desk.json");
    save_checkpoint(&desk.small_ckpt, &path).map_err(err)?;
    let loaded = load_checkpoint::<f32>(&path).map_err(err)?;
    let probe = desk.stats.apply(&desk.val[0].image).crop([0, 0, 0], [32; 3], 0.0);
    let cfg = InferenceConfig::default();
    let (a, _) = predict_patch(&desk.small, &probe, &cfg).map_err(err)?;
    let (b, _) = predict_patch(&loaded.model, &probe, &cfg).map_err(err)?;
    let identical = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((
        identical && loaded == desk.small_ckpt,
        format!("{} probe probabilities bit-identical; parameters and optimizer state equal", a.data.len()),
    ))
}

fn main() {
    let start = Instant::now();
    let mut results = Vec::new();
    run(&mut results, 1, "gradient suite", gradient_suite);
    run(&mut results, 2, "gather oracle", gather_oracle);
    run(&mut results, 3, "mesh density law", mesh_density);
    run(&mut results, 4, "sparse = dense (structural)", structural_consistency);
    run(&mut results, 7, "sampler statistics", sampler_statistics);
    run(&mut results, 8, "loss analytics", loss_analytics);
    run(&mut results, 10, "sliding-window partition", sliding_partition);

    println!("training desk models ...");
    match train_desk_models() {
        Ok(desk) => {
            run(&mut results, 5, "sparse ~ dense (behavioral)", || sparse_matches_dense(&desk));
            run(&mut results, 6, "end-to-end learning", || end_to_end(&desk));
            run(&mut results, 9, "checkpoint roundtrip", || checkpoint_roundtrip(&desk));
        }
        Err(e) => {
            for (id, name) in [(5, "sparse ~ dense (behavioral)"), (6, "end-to-end learning"), (9, "checkpoint roundtrip")] {
                run(&mut results, id, name, || Err(format!("desk training failed: {e}")));
            }
        }
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0}s", results.len(), start.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
