use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Case, ImageVolume, LabelVolume};
use crate::error::Result;

/// A training patch cut from a case.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub image: ImageVolume,
    pub labels: LabelVolume,
    /// Whether the window was centered on a foreground voxel.
    pub foreground_centered: bool,
}

/// Cuts a `patch_size` window. With probability `fg_fraction` the window is
/// centered on a uniformly chosen foreground voxel (clamped to valid
/// positions), otherwise its position is uniform. Axes shorter than the
/// patch are zero-padded symmetrically.
pub fn sample_patch(case: &Case, patch_size: [usize; 3], fg_fraction: f64, seed: u64) -> Result<PatchSample> {
    let dims = case.image.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // valid window origins per axis
    let range: [(isize, isize); 3] = std::array::from_fn(|a| {
        if dims[a] >= patch_size[a] {
            (0, (dims[a] - patch_size[a]) as isize)
        } else {
            let lead = -(((patch_size[a] - dims[a]) / 2) as isize);
            (lead, lead)
        }
    });
    let want_fg = rng.random_bool(fg_fraction.clamp(0.0, 1.0));
    let mut origin = None;
    if want_fg {
        let fg: Vec<usize> =
            case.labels.data().iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i).collect();
        if !fg.is_empty() {
            let c = case.labels.coords(fg[rng.random_range(0..fg.len())]);
            origin = Some(std::array::from_fn(|a| {
                (c[a] as isize - (patch_size[a] / 2) as isize).clamp(range[a].0, range[a].1)
            }));
        }
    }
    let foreground_centered = origin.is_some();
    let origin: [isize; 3] =
        origin.unwrap_or_else(|| std::array::from_fn(|a| rng.random_range(range[a].0 as i64..=range[a].1 as i64) as isize));
    Ok(PatchSample {
        image: case.image.crop(origin, patch_size, 0.0),
        labels: case.labels.crop(origin, patch_size, 0),
        foreground_centered,
    })
}
