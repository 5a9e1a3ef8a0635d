//! Synthetic blob phantoms standing in for annotated CT volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{ImageVolume, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::seed;

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub image: ImageVolume,
    pub labels: LabelVolume,
}

impl Case {
    pub fn new(image: ImageVolume, labels: LabelVolume) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(Error::Shape(format!("image {:?} and labels {:?} differ", image.dims(), labels.dims())));
        }
        Ok(Self { image, labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_volumes: usize,
    pub dims: [usize; 3],
    /// Background plus foreground classes.
    pub num_classes: usize,
    /// Inclusive range of blobs per foreground class.
    pub blobs_per_class: (usize, usize),
    /// Range of ellipsoid semi-axes in voxels.
    pub radius_range: (f64, f64),
    /// Intensity step between consecutive classes.
    pub contrast: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_volumes: 8,
            dims: [64, 64, 64],
            num_classes: 2,
            blobs_per_class: (1, 3),
            radius_range: (6.0, 14.0),
            contrast: 1.0,
            noise_std: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0 || d % 16 != 0) {
            return Err(Error::Config(format!("dims {:?} must be positive multiples of 16", self.dims)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} must lie in 2..=255", self.num_classes)));
        }
        let (lo, hi) = self.blobs_per_class;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("blob count range {:?} invalid", self.blobs_per_class)));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0) || rlo > rhi {
            return Err(Error::Config(format!("radius range {:?} invalid", self.radius_range)));
        }
        let min_dim = *self.dims.iter().min().unwrap() as f64;
        if 2.0 * rhi + 1.0 > min_dim {
            return Err(Error::Config(format!(
                "blobs of radius up to {rhi} cannot fit in dims {:?}",
                self.dims
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 32;

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Case>> {
    cfg.validate()?;
    (0..cfg.num_volumes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0x5E, i as u64]));
            for _ in 0..MAX_ATTEMPTS {
                if let Some(case) = generate_one(cfg, &mut rng) {
                    return Ok(case);
                }
            }
            Err(Error::Config(format!("could not place every class in volume {i} after {MAX_ATTEMPTS} attempts")))
        })
        .collect()
}

fn generate_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Case> {
    let [w, h, d] = cfg.dims;
    let mut labels = LabelVolume::filled(cfg.dims, 0);
    for class in 1..cfg.num_classes {
        let count = rng.random_range(cfg.blobs_per_class.0..=cfg.blobs_per_class.1);
        for _ in 0..count {
            let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(cfg.radius_range.0..=cfg.radius_range.1));
            let center: [f64; 3] =
                std::array::from_fn(|a| rng.random_range(radii[a]..=(cfg.dims[a] as f64 - 1.0 - radii[a])));
            paint_ellipsoid(&mut labels, center, radii, class as u8);
        }
    }
    let mut present = vec![false; cfg.num_classes];
    for &l in labels.data() {
        present[l as usize] = true;
    }
    if !present[1..].iter().all(|&p| p) {
        return None;
    }
    // low-frequency background shading
    let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).ok()?;
    let mut image = ImageVolume::filled(cfg.dims, 0.0);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64 / w as f64, y as f64 / h as f64, z as f64 / d as f64];
                let shade: f64 =
                    (0..3).map(|a| (std::f64::consts::TAU * freq[a] * p[a] + phase[a]).sin()).sum::<f64>() * 0.1;
                let class = f64::from(labels.get(x, y, z));
                let v = shade + cfg.contrast * class + noise.sample(rng);
                image.set(x, y, z, v as f32);
            }
        }
    }
    Some(Case { image, labels })
}

fn paint_ellipsoid(labels: &mut LabelVolume, center: [f64; 3], radii: [f64; 3], class: u8) {
    let dims = labels.dims();
    let lo: [usize; 3] = std::array::from_fn(|a| (center[a] - radii[a]).floor().max(0.0) as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| ((center[a] + radii[a]).ceil() as usize).min(dims[a] - 1));
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [x as f64, y as f64, z as f64];
                let r: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                if r <= 1.0 {
                    labels.set(x, y, z, class);
                }
            }
        }
    }
}

/// Single sphere of class 1 on a flat background.
pub fn sphere_phantom(dims: [usize; 3], center: [f64; 3], radius: f64, contrast: f64, noise_std: f64, seed: u64) -> Result<Case> {
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = LabelVolume::filled(dims, 0);
    paint_ellipsoid(&mut labels, center, [radius; 3], 1);
    let data = labels.data().iter().map(|&l| (contrast * f64::from(l) + noise.sample(&mut rng)) as f32).collect();
    let image = Volume::new(dims, [1.0; 3], data)?;
    Case::new(image, labels)
}
