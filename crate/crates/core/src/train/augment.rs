//! Patch augmentations. Spatial transforms are applied identically to image
//! and labels; intensity transforms touch the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageVolume, LabelVolume, Volume, Voxel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentFlags {
    pub flip: bool,
    pub rotate90: bool,
    pub scale: bool,
    pub gaussian_noise: bool,
    pub contrast: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self { flip: true, rotate90: true, scale: true, gaussian_noise: true, contrast: true }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        Self { flip: false, rotate90: false, scale: false, gaussian_noise: false, contrast: false }
    }
}

/// Volume with `out(p) = in(source(p))`.
fn remap<V: Voxel>(v: &Volume<V>, out_dims: [usize; 3], source: impl Fn([usize; 3]) -> [usize; 3]) -> Volume<V> {
    let mut data = Vec::with_capacity(v.len());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let [sx, sy, sz] = source([x, y, z]);
                data.push(v.get(sx, sy, sz));
            }
        }
    }
    Volume::new(out_dims, v.spacing(), data).expect("same voxel count")
}

pub fn flip_axis<V: Voxel>(v: &Volume<V>, axis: usize) -> Volume<V> {
    let dims = v.dims();
    remap(v, dims, |mut p| {
        p[axis] = dims[axis] - 1 - p[axis];
        p
    })
}

/// Quarter turn in the plane of axes `(a, b)`; both extents must match.
pub fn rotate90<V: Voxel>(v: &Volume<V>, a: usize, b: usize) -> Volume<V> {
    let dims = v.dims();
    debug_assert_eq!(dims[a], dims[b]);
    let n = dims[a];
    remap(v, dims, |p| {
        let mut s = p;
        s[a] = n - 1 - p[b];
        s[b] = p[a];
        s
    })
}

pub fn augment(
    image: &ImageVolume,
    labels: &LabelVolume,
    flags: &AugmentFlags,
    seed: u64,
) -> Result<(ImageVolume, LabelVolume)> {
    if image.dims() != labels.dims() {
        return Err(Error::Shape(format!("image {:?} vs labels {:?}", image.dims(), labels.dims())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut img, mut lab) = (image.clone(), labels.clone());
    if flags.flip {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                img = flip_axis(&img, axis);
                lab = flip_axis(&lab, axis);
            }
        }
    }
    if flags.rotate90 {
        let dims = img.dims();
        let planes: Vec<(usize, usize)> =
            [(0, 1), (0, 2), (1, 2)].into_iter().filter(|&(a, b)| dims[a] == dims[b]).collect();
        if !planes.is_empty() {
            let (a, b) = planes[rng.random_range(0..planes.len())];
            for _ in 0..rng.random_range(0..4) {
                img = rotate90(&img, a, b);
                lab = rotate90(&lab, a, b);
            }
        }
    }
    if flags.scale {
        let f: f32 = rng.random_range(0.9..1.1);
        img.data_mut().iter_mut().for_each(|v| *v *= f);
    }
    if flags.contrast {
        let f: f32 = rng.random_range(0.75..1.25);
        let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / img.len().max(1) as f64;
        let mean = mean as f32;
        img.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
    }
    if flags.gaussian_noise {
        let std: f64 = rng.random_range(0.0..0.1);
        let noise = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        img.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng) as f32);
    }
    Ok((img, lab))
}
