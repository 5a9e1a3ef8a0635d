#![allow(dead_code)]

use imunet::autodiff::{Activation, GatherIndex};
use imunet::model::ModelVars;
use imunet::{grad_check, GradCheckReport, Graph, ModelConfig, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Values at least 0.1 away from zero, so kinks stay out of the stencil.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|v| v.signum() * (0.1 + v.abs()))
}

/// `Σ x ⊙ R` for a fixed random `R`, which gives every element its own
/// upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let r = g.constant(randn(&shape, seed ^ 0xABCD));
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

impl GradCase {
    fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self { name, inputs, build: Box::new(build) }
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        grad_check(|g, v| (self.build)(g, v), &self.inputs, EPS)
    }
}

pub fn primitive_cases() -> Vec<GradCase> {
    let act = |name, kind: Activation| {
        GradCase::new(name, vec![away_from_zero(&[4, 5], 40)], move |g, v| {
            let y = g.activation(v[0], kind)?;
            weighted_sum(g, y, 41)
        })
    };
    vec![
        GradCase::new(
            "conv3d stride 1 pad 1",
            vec![randn(&[2, 2, 5, 4, 3], 1), randn(&[3, 2, 3, 3, 3], 2), randn(&[3], 3)],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 1, 1)?;
                weighted_sum(g, y, 4)
            },
        ),
        GradCase::new(
            "conv3d stride 2 pad 1",
            vec![randn(&[1, 2, 6, 6, 6], 5), randn(&[2, 2, 3, 3, 3], 6), randn(&[2], 7)],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 2, 1)?;
                weighted_sum(g, y, 8)
            },
        ),
        GradCase::new(
            "conv3d stride 1 pad 0",
            vec![randn(&[1, 1, 4, 5, 4], 9), randn(&[2, 1, 3, 3, 3], 10), randn(&[2], 11)],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 1, 0)?;
                weighted_sum(g, y, 12)
            },
        ),
        GradCase::new("avg_pool3d k3 s1 p1", vec![randn(&[2, 2, 4, 3, 5], 13)], |g, v| {
            let y = g.avg_pool3d(v[0], 3, 1, 1)?;
            weighted_sum(g, y, 14)
        }),
        GradCase::new("avg_pool3d k2 s2 p0", vec![randn(&[1, 2, 4, 4, 6], 15)], |g, v| {
            let y = g.avg_pool3d(v[0], 2, 2, 0)?;
            weighted_sum(g, y, 16)
        }),
        GradCase::new("instance_norm", vec![randn(&[2, 3, 3, 4, 5], 17)], |g, v| {
            let y = g.instance_norm(v[0])?;
            weighted_sum(g, y, 18)
        }),
        act("relu", Activation::Relu),
        act("leaky_relu", Activation::LeakyRelu(0.01)),
        act("sigmoid", Activation::Sigmoid),
        GradCase::new("dropout (training)", vec![randn(&[6, 7], 19)], |g, v| {
            let y = g.dropout(v[0], 0.3, true, 77)?;
            weighted_sum(g, y, 20)
        }),
        GradCase::new(
            "dense_weightnorm",
            vec![randn(&[5, 4], 21), randn(&[3, 4], 22), randn(&[3], 23), randn(&[3], 24)],
            |g, v| {
                let y = g.dense_weightnorm(v[0], v[1], v[2], v[3])?;
                weighted_sum(g, y, 25)
            },
        ),
        GradCase::new("matmul", vec![randn(&[3, 4], 26), randn(&[4, 2], 27)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 28)
        }),
        GradCase::new("add", vec![randn(&[3, 4], 29), randn(&[3, 4], 30)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 31)
        }),
        GradCase::new("mul", vec![randn(&[3, 4], 32), randn(&[3, 4], 33)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 34)
        }),
        GradCase::new("sum", vec![randn(&[2, 3, 4], 35)], |g, v| {
            let s = g.sum(v[0]);
            g.mul(s, s)
        }),
        GradCase::new(
            "concat_cols",
            vec![randn(&[4, 2], 36), randn(&[4, 3], 37), randn(&[4, 1], 38)],
            |g, v| {
                let y = g.concat_cols(v)?;
                weighted_sum(g, y, 39)
            },
        ),
        GradCase::new("gather", vec![randn(&[2, 3, 2, 3, 4], 42)], |g, v| {
            let idx = [
                GatherIndex { batch: 0, cell: [0, 0, 0] },
                GatherIndex { batch: 1, cell: [3, 2, 1] },
                GatherIndex { batch: 1, cell: [3, 2, 1] },
                GatherIndex { batch: 0, cell: [2, 1, 0] },
            ];
            let y = g.gather(v[0], &idx)?;
            weighted_sum(g, y, 43)
        }),
        GradCase::new("dice_ce_loss C=1", vec![randn(&[7, 1], 44)], |g, v| {
            Ok(g.dice_ce_loss(v[0], &[0, 1, 1, 0, 1, 0, 0])?.0)
        }),
        GradCase::new("dice_ce_loss C=2", vec![randn(&[7, 2], 45)], |g, v| {
            Ok(g.dice_ce_loss(v[0], &[0, 1, 1, 0, 1, 0, 0])?.0)
        }),
        GradCase::new("dice_ce_loss C=3", vec![randn(&[8, 3], 46)], |g, v| {
            Ok(g.dice_ce_loss(v[0], &[0, 1, 2, 2, 1, 0, 0, 2])?.0)
        }),
    ]
}

/// Encoder, feature gather, decoder and loss on a tiny model, checked with
/// respect to every parameter.
pub fn chain_case() -> GradCase {
    let cfg = {
        let mut c = ModelConfig::with([2, 2, 2, 2], 6, 2);
        c.decoder.levels = 2;
        c
    };
    let model = imunet::ImplicitUNet::<f64>::init(&cfg, 5).expect("valid config");
    let mut r = rng(6);
    // random biases keep pre-activations off the ReLU kink at exactly zero
    let params: Vec<Tensor<f64>> = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| if name.ends_with("bias") { Tensor::randn(t.shape(), 0.5, &mut r) } else { t.clone() })
        .collect();
    let input = Tensor::<f64>::randn(&[2, 1, 16, 16, 16], 1.0, &mut r);
    let points: Vec<(usize, [f64; 3])> = (0..24)
        .map(|i| (i % 2, [r.random_range(0.0..15.0), r.random_range(0.0..15.0), r.random_range(0.0..15.0)]))
        .collect();
    let targets: Vec<usize> = (0..24).map(|i| (i * 7 % 5) % 2).collect();
    GradCase::new("encoder -> gather -> decoder -> loss", params, move |g, v| {
        let mv = ModelVars::from_vars(&cfg, v)?;
        let x = g.constant(input.clone());
        let logits = mv.logits(g, x, &points, true, 3)?;
        Ok(g.dice_ce_loss(logits, &targets)?.0)
    })
}

pub struct Consistency {
    pub s1_bit_identical: bool,
    pub refined: usize,
    pub unrefined: usize,
    pub mismatches: usize,
}

/// Compares sparse patch prediction with dense per-voxel decoding of the
/// same model: spacing 1 must match bit for bit; at `spacing`, band voxels
/// must equal the dense value and all others their nearest broad point.
pub fn sparse_dense_consistency(
    model: &imunet::Model32,
    patch: &imunet::ImageVolume,
    spacing: usize,
) -> Result<Consistency> {
    use imunet::inference::{boundary_band, broad_grid, nn_interpolate, predict_patch};
    use imunet::InferenceConfig;

    let dims = patch.dims();
    let c = model.num_classes();
    let pyramid = model.encode(patch)?;
    let all: Vec<[f64; 3]> = (0..patch.len()).map(|i| patch.coords(i).map(|v| v as f64)).collect();
    let dense = model.decode_points(&pyramid, &all)?;

    let (p1, s1) = predict_patch(model, patch, &InferenceConfig { spacing: 1, ..Default::default() })?;
    let s1_bit_identical = s1.refinement_points == 0
        && p1.data.len() == dense.len()
        && p1.data.iter().zip(&dense).all(|(a, b)| a.to_bits() == b.to_bits());

    let cfg = InferenceConfig { spacing, ..Default::default() };
    let (ps, _) = predict_patch(model, patch, &cfg)?;
    let grid = broad_grid(dims, spacing);
    let coarse: Vec<f32> =
        grid.iter().flat_map(|p| dense[patch.index(p[0], p[1], p[2]) * c..][..c].to_vec()).collect();
    let broad = nn_interpolate(&coarse, c, dims, spacing)?;
    let mut in_band = vec![false; patch.len()];
    for p in boundary_band(&broad.argmax(), cfg.band_radius()) {
        in_band[patch.index(p[0], p[1], p[2])] = true;
    }
    let (mut refined, mut unrefined, mut mismatches) = (0, 0, 0);
    for (i, &band) in in_band.iter().enumerate() {
        let got = ps.voxel(i);
        let want = if band { &dense[i * c..(i + 1) * c] } else { broad.voxel(i) };
        if band {
            refined += 1;
        } else {
            unrefined += 1;
        }
        if got.iter().zip(want).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(Consistency { s1_bit_identical, refined, unrefined, mismatches })
}

/// A random image with a bright ball, so random models see some structure.
pub fn ball_patch(dims: [usize; 3], seed: u64) -> imunet::ImageVolume {
    let mut r = rng(seed);
    let center: [f64; 3] = std::array::from_fn(|a| r.random_range(0.3..0.7) * dims[a] as f64);
    let radius = r.random_range(0.2..0.35) * dims[0] as f64;
    let n = dims.iter().product();
    let mut img = imunet::ImageVolume::new(dims, [1.0; 3], vec![0.0; n]).expect("dims");
    for i in 0..n {
        let p = img.coords(i);
        let d2: f64 = (0..3).map(|a| (p[a] as f64 - center[a]).powi(2)).sum();
        img.data_mut()[i] = if d2 < radius * radius { 2.0 } else { 0.0 } + r.random_range(-0.2..0.2);
    }
    img
}
