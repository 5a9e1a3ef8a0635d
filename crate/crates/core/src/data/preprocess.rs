//! Resampling along z and dataset-wide intensity normalization.

use serde::{Deserialize, Serialize};

use super::volume::{ImageVolume, Volume, Voxel};
use crate::error::{Error, Result};

/// Resamples to a new z spacing; depth becomes `round(D · sz / target)`.
///
/// Output slice centers are aligned with the input extent. Images are
/// interpolated linearly, labels take the nearest slice.
pub fn resample_z<V: Voxel>(volume: &Volume<V>, target_dz: f32) -> Result<Volume<V>> {
    if !(target_dz > 0.0) {
        return Err(Error::InvalidArgument(format!("target z spacing {target_dz} must be positive")));
    }
    let [w, h, d] = volume.dims();
    let [sx, sy, sz] = volume.spacing();
    let ratio = f64::from(target_dz) / f64::from(sz);
    let new_d = (d as f64 / ratio).round() as usize;
    if new_d < 1 {
        return Err(Error::InvalidArgument(format!(
            "resampling depth {d} at {sz} mm to {target_dz} mm leaves no slices"
        )));
    }
    let plane = w * h;
    let src = volume.data();
    let mut out = Vec::with_capacity(plane * new_d);
    for k in 0..new_d {
        let pos = ((k as f64 + 0.5) * ratio - 0.5).clamp(0.0, (d - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(d - 1);
        let t = pos - i0 as f64;
        out.extend((0..plane).map(|p| V::interpolate(src[i0 * plane + p], src[i1 * plane + p], t)));
    }
    Volume::new([w, h, new_d], [sx, sy, target_dz], out)
}

/// Percentile by linear interpolation between order statistics
/// (rank `q · (n − 1)`), `q ∈ [0, 1]`.
pub fn percentile(values: &[f32], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    Some(f64::from(sorted[lo]) * (1.0 - t) + f64::from(sorted[hi]) * t)
}

pub const CAP_PERCENTILE: f64 = 0.95;
pub const STD_FLOOR: f64 = 1e-8;

/// Statistics fixed on the training set and reused for held-out volumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub cap: f64,
    pub mean: f64,
    pub std: f64,
}

impl DatasetStats {
    /// Cap, then standardize one volume.
    pub fn apply(&self, volume: &ImageVolume) -> ImageVolume {
        let std = self.std.max(STD_FLOOR);
        volume.map(|v| ((f64::from(v).min(self.cap) - self.mean) / std) as f32)
    }
}

/// Caps pooled intensities at their 95th percentile, then z-scores with the
/// pooled post-cap mean and standard deviation.
pub fn normalize_dataset(volumes: &[ImageVolume]) -> Result<(Vec<ImageVolume>, DatasetStats)> {
    if volumes.iter().all(|v| v.is_empty()) {
        return Err(Error::InvalidArgument("cannot normalize an empty dataset".into()));
    }
    let pooled: Vec<f32> = volumes.iter().flat_map(|v| v.data().iter().copied()).collect();
    let cap = percentile(&pooled, CAP_PERCENTILE).expect("non-empty");
    let n = pooled.len() as f64;
    let mean = pooled.iter().map(|&v| f64::from(v).min(cap)).sum::<f64>() / n;
    let var = pooled.iter().map(|&v| (f64::from(v).min(cap) - mean).powi(2)).sum::<f64>() / n;
    let stats = DatasetStats { cap, mean, std: var.sqrt().max(STD_FLOOR) };
    Ok((volumes.iter().map(|v| stats.apply(v)).collect(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::LabelVolume;

    #[test]
    fn identity_when_spacing_unchanged() {
        let v = Volume::new([2, 2, 5], [1.0, 1.0, 2.5], (0..20).map(|i| i as f32 * 0.3).collect()).unwrap();
        assert_eq!(resample_z(&v, 2.5).unwrap(), v);
    }

    #[test]
    fn doubling_spacing_halves_depth() {
        for d in [7usize, 8, 31, 96] {
            let v = ImageVolume::filled([1, 1, d], 1.0).with_spacing([1.0, 1.0, 1.25]).unwrap();
            let r = resample_z(&v, 2.5).unwrap();
            assert!((r.dims()[2] as f64 - d as f64 / 2.0).abs() <= 1.0);
            assert_eq!(r.spacing()[2], 2.5);
        }
    }

    #[test]
    fn labels_keep_their_value_set() {
        let data: Vec<u8> = (0..40).map(|i| [0u8, 3, 5][i % 3]).collect();
        let v = LabelVolume::new([2, 2, 10], [1.0, 1.0, 1.0], data).unwrap();
        for t in [0.3f32, 0.7, 1.6, 4.0] {
            let r = resample_z(&v, t).unwrap();
            assert!(r.data().iter().all(|x| [0, 3, 5].contains(x)));
        }
    }

    #[test]
    fn linear_interpolation_between_slices() {
        let v = ImageVolume::new([1, 1, 2], [1.0; 3], vec![0.0, 1.0]).unwrap();
        let r = resample_z(&v, 0.5).unwrap();
        // centers at z = -0.25, 0.25, 0.75, 1.25 → clamped
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rejects_empty_result() {
        let v = ImageVolume::filled([1, 1, 2], 0.0);
        assert!(resample_z(&v, 10.0).is_err());
        assert!(resample_z(&v, 0.0).is_err());
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let v: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        assert!((percentile(&v, 0.95).unwrap() - 95.05).abs() < 1e-9);
    }

    #[test]
    fn normalized_pool_is_standard() {
        let a = ImageVolume::new([4, 4, 2], [1.0; 3], (0..32).map(|i| (i * i % 17) as f32).collect()).unwrap();
        let b = ImageVolume::new([3, 3, 3], [1.0; 3], (0..27).map(|i| 100.0 + i as f32).collect()).unwrap();
        let (out, stats) = normalize_dataset(&[a.clone(), b]).unwrap();
        assert!(stats.std > 0.0);
        let pooled: Vec<f64> = out.iter().flat_map(|v| v.data().iter().map(|&x| f64::from(x))).collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let std = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-4);
        // capping never raises a value
        for (&x, &y) in a.data().iter().zip(out[0].data()) {
            assert!(f64::from(x).min(stats.cap) <= f64::from(x));
            assert!((f64::from(y) * stats.std + stats.mean - f64::from(x).min(stats.cap)).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_dataset_maps_to_zero() {
        let a = ImageVolume::filled([2, 2, 2], 3.5);
        let (out, _) = normalize_dataset(&[a]).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.0));
        assert!(normalize_dataset(&[]).is_err());
    }
}
