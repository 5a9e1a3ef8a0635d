//! Sparse inference: broad mesh prediction, nearest-neighbor fill and
//! refinement near the predicted boundary, plus sliding-window assembly.

use serde::{Deserialize, Serialize};

use crate::data::{ImageVolume, LabelVolume};
use crate::encoder::check_patch_dims;
use crate::error::{Error, Result};
use crate::model::ImplicitUNet;
use crate::points::extract_boundary;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Broad mesh spacing `s`.
    pub spacing: usize,
    pub window_overlap: f64,
    /// Gaussian σ per axis as a fraction of the patch extent.
    pub gaussian_sigma_fraction: f64,
    pub smooth_kernel: usize,
    /// Chebyshev radius of the refinement band; `None` uses `spacing`.
    pub refine_band_radius: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            spacing: 4,
            window_overlap: 0.3,
            gaussian_sigma_fraction: 1.0 / 8.0,
            smooth_kernel: 3,
            refine_band_radius: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spacing == 0 {
            return Err(Error::Config("spacing must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.window_overlap) {
            return Err(Error::Config(format!("window overlap {} outside [0, 1)", self.window_overlap)));
        }
        if !(self.gaussian_sigma_fraction > 0.0) {
            return Err(Error::Config("gaussian_sigma_fraction must be positive".into()));
        }
        if self.smooth_kernel % 2 == 0 {
            return Err(Error::Config(format!("smooth kernel {} must be odd", self.smooth_kernel)));
        }
        Ok(())
    }

    pub fn band_radius(&self) -> usize {
        self.refine_band_radius.unwrap_or(self.spacing)
    }
}

/// Decoder evaluation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionStats {
    pub broad_points: usize,
    pub refinement_points: usize,
    pub total_voxels: usize,
    /// Patches where no boundary was found, so refinement did not run.
    pub refinement_skipped: usize,
}

impl PredictionStats {
    pub fn evaluations(&self) -> usize {
        self.broad_points + self.refinement_points
    }

    pub fn merge(&mut self, other: &PredictionStats) {
        self.broad_points += other.broad_points;
        self.refinement_points += other.refinement_points;
        self.total_voxels += other.total_voxels;
        self.refinement_skipped += other.refinement_skipped;
    }
}

/// Per-voxel class probabilities, voxel-major (`voxels × channels`), voxels
/// in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ProbVolume {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        let need = dims.iter().product::<usize>() * channels;
        if data.len() != need || channels == 0 {
            return Err(Error::Shape(format!(
                "{} probabilities for {dims:?} × {channels} channels (need {need})",
                data.len()
            )));
        }
        Ok(Self { dims, spacing: [1.0; 3], channels, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Argmax labels (lowest class wins ties); one channel is thresholded
    /// at 0.5.
    pub fn argmax(&self) -> LabelVolume {
        let labels = self.data.chunks(self.channels).map(|p| hard_label(p)).collect();
        LabelVolume::new(self.dims, self.spacing, labels).expect("matching voxel count")
    }

    fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> ProbVolume {
        let c = self.channels;
        let mut data = Vec::with_capacity(size.iter().product::<usize>() * c);
        for z in 0..size[2] {
            for y in 0..size[1] {
                let row = self.index(origin[0], origin[1] + y, origin[2] + z);
                data.extend_from_slice(&self.data[row * c..(row + size[0]) * c]);
            }
        }
        ProbVolume { dims: size, spacing: self.spacing, channels: c, data }
    }
}

fn hard_label(p: &[f32]) -> u8 {
    if p.len() == 1 {
        return u8::from(p[0] > 0.5);
    }
    let mut best = 0;
    for (c, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = c;
        }
    }
    best as u8
}

fn grid_extent(d: usize, s: usize) -> usize {
    d.div_ceil(s)
}

/// Voxels with every coordinate a multiple of `s`, x fastest.
pub fn broad_grid(dims: [usize; 3], s: usize) -> Vec<[usize; 3]> {
    let s = s.max(1);
    let mut out = Vec::with_capacity(dims.iter().map(|&d| grid_extent(d, s)).product());
    for z in (0..dims[2]).step_by(s) {
        for y in (0..dims[1]).step_by(s) {
            for x in (0..dims[0]).step_by(s) {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Index of the grid line nearest to `x`; ties go to the lower line.
fn nearest_grid_line(x: usize, s: usize, lines: usize) -> usize {
    let i = x / s;
    if i + 1 < lines && (x - i * s) > ((i + 1) * s - x) {
        i + 1
    } else {
        i
    }
}

/// Dense probabilities where every voxel copies its nearest broad point.
/// `coarse` holds `channels` values per point of [`broad_grid`].
pub fn nn_interpolate(coarse: &[f32], channels: usize, dims: [usize; 3], s: usize) -> Result<ProbVolume> {
    if s == 0 {
        return Err(Error::InvalidArgument("spacing must be at least 1".into()));
    }
    let g: [usize; 3] = dims.map(|d| grid_extent(d, s));
    if coarse.len() != g.iter().product::<usize>() * channels {
        return Err(Error::Shape(format!(
            "{} coarse values do not cover a {g:?} grid with {channels} channels",
            coarse.len()
        )));
    }
    let near: [Vec<usize>; 3] = std::array::from_fn(|a| (0..dims[a]).map(|x| nearest_grid_line(x, s, g[a])).collect());
    let mut data = Vec::with_capacity(dims.iter().product::<usize>() * channels);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = (near[2][z] * g[1] + near[1][y]) * g[0] + near[0][x];
                data.extend_from_slice(&coarse[p * channels..(p + 1) * channels]);
            }
        }
    }
    ProbVolume::new(dims, channels, data)
}

/// 1-D running maximum over `[i - r, i + r]` along one axis of a mask.
fn dilate_axis(mask: &[bool], dims: [usize; 3], axis: usize, r: usize) -> Vec<bool> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![false; mask.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % n;
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(n - 1);
        let base = i - pos * stride;
        *o = (lo..=hi).any(|p| mask[base + p * stride]);
    }
    out
}

/// Voxels within Chebyshev distance `radius` of a label interface, x fastest.
pub fn boundary_band(labels: &LabelVolume, radius: usize) -> Vec<[usize; 3]> {
    let boundary = extract_boundary(labels);
    if boundary.is_empty() {
        return Vec::new();
    }
    let dims = labels.dims();
    let mut mask = vec![false; labels.len()];
    for &[x, y, z] in &boundary {
        mask[labels.index(x, y, z)] = true;
    }
    for axis in 0..3 {
        mask = dilate_axis(&mask, dims, axis, radius);
    }
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| labels.coords(i)).collect()
}

fn as_points(coords: &[[usize; 3]]) -> Vec<[f64; 3]> {
    coords.iter().map(|c| c.map(|v| v as f64)).collect()
}

/// Broad pass on the `s`-mesh, nearest-neighbor fill, then exact decoding
/// of the boundary band. Band voxels on the mesh are already exact and are
/// not evaluated again.
pub fn predict_patch<T: Scalar>(
    model: &ImplicitUNet<T>,
    patch: &ImageVolume,
    cfg: &InferenceConfig,
) -> Result<(ProbVolume, PredictionStats)> {
    cfg.validate()?;
    let dims = patch.dims();
    check_patch_dims(dims)?;
    let s = cfg.spacing;
    let c = model.num_classes();
    let pyramid = model.encode(patch)?;
    let grid = broad_grid(dims, s);
    let coarse = model.decode_points(&pyramid, &as_points(&grid))?;
    let mut probs = nn_interpolate(&coarse, c, dims, s)?;
    probs.spacing = patch.spacing();

    let band = boundary_band(&probs.argmax(), cfg.band_radius());
    let refine: Vec<[usize; 3]> = band.iter().copied().filter(|p| p.iter().any(|&v| v % s != 0)).collect();
    if !refine.is_empty() {
        let fine = model.decode_points(&pyramid, &as_points(&refine))?;
        for (p, vals) in refine.iter().zip(fine.chunks(c)) {
            let i = probs.index(p[0], p[1], p[2]);
            probs.data[i * c..(i + 1) * c].copy_from_slice(vals);
        }
    }
    let stats = PredictionStats {
        broad_points: grid.len(),
        refinement_points: refine.len(),
        total_voxels: patch.len(),
        refinement_skipped: usize::from(band.is_empty()),
    };
    Ok((probs, stats))
}

/// Anything that maps an image patch to per-voxel class probabilities.
pub trait PatchPredictor {
    fn channels(&self) -> usize;
    fn predict(&self, patch: &ImageVolume) -> Result<(ProbVolume, PredictionStats)>;
}

pub struct SparsePredictor<'a, T> {
    pub model: &'a ImplicitUNet<T>,
    pub config: InferenceConfig,
}

impl<T: Scalar> PatchPredictor for SparsePredictor<'_, T> {
    fn channels(&self) -> usize {
        self.model.num_classes()
    }

    fn predict(&self, patch: &ImageVolume) -> Result<(ProbVolume, PredictionStats)> {
        predict_patch(self.model, patch, &self.config)
    }
}

/// Separable center-peaked weights (x fastest), maximum 1, floor 1e-4.
pub fn gaussian_weights(dims: [usize; 3], sigma_fraction: f64) -> Vec<f32> {
    let axis: [Vec<f64>; 3] = std::array::from_fn(|a| {
        let d = dims[a];
        let center = (d as f64 - 1.0) / 2.0;
        let sigma = d as f64 * sigma_fraction;
        let w: Vec<f64> = (0..d).map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
        let peak = w.iter().copied().fold(0.0, f64::max);
        w.into_iter().map(|v| v / peak).collect()
    });
    let mut out = Vec::with_capacity(dims.iter().product());
    for &wz in &axis[2] {
        for &wy in &axis[1] {
            for &wx in &axis[0] {
                out.push((wx * wy * wz).max(1e-4) as f32);
            }
        }
    }
    out
}

/// Window origins along one axis: stride `⌊patch·(1−overlap)⌋`, last window
/// flush with the far edge.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - patch;
    let mut out: Vec<usize> = (0..last).step_by(step).collect();
    out.push(last);
    out
}

/// Tiles `volume` with overlapping patches and blends their predictions
/// with Gaussian weights. Axes shorter than the patch are zero-padded
/// symmetrically and cropped back afterwards.
pub fn sliding_window<P: PatchPredictor + ?Sized>(
    predictor: &P,
    volume: &ImageVolume,
    patch_size: [usize; 3],
    cfg: &InferenceConfig,
) -> Result<(ProbVolume, PredictionStats)> {
    cfg.validate()?;
    if patch_size.contains(&0) {
        return Err(Error::InvalidArgument(format!("patch size {patch_size:?} must be positive")));
    }
    let dims = volume.dims();
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch_size[a]));
    let lead: [usize; 3] = std::array::from_fn(|a| (padded[a] - dims[a]) / 2);
    let work = if padded == dims {
        volume.clone()
    } else {
        volume.crop(lead.map(|l| -(l as isize)), padded, 0.0)
    };
    let c = predictor.channels();
    let weights = gaussian_weights(patch_size, cfg.gaussian_sigma_fraction);
    let n_vox: usize = padded.iter().product();
    let mut num = vec![0.0f64; n_vox * c];
    let mut den = vec![0.0f64; n_vox];
    let mut stats = PredictionStats::default();
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(padded[a], patch_size[a], cfg.window_overlap));
    for &oz in &starts[2] {
        for &oy in &starts[1] {
            for &ox in &starts[0] {
                let patch = work.crop([ox as isize, oy as isize, oz as isize], patch_size, 0.0);
                let (probs, st) = predictor.predict(&patch)?;
                if probs.dims != patch_size || probs.channels != c {
                    return Err(Error::Shape(format!(
                        "predictor returned {:?} × {} for a {patch_size:?} patch",
                        probs.dims, probs.channels
                    )));
                }
                stats.merge(&st);
                let mut k = 0;
                for z in 0..patch_size[2] {
                    for y in 0..patch_size[1] {
                        let row = ((oz + z) * padded[1] + oy + y) * padded[0] + ox;
                        for x in 0..patch_size[0] {
                            let w = f64::from(weights[k]);
                            den[row + x] += w;
                            for ch in 0..c {
                                num[(row + x) * c + ch] += w * f64::from(probs.data[k * c + ch]);
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let data = num.iter().enumerate().map(|(i, &v)| (v / den[i / c]) as f32).collect();
    let mut out = ProbVolume::new(padded, c, data)?;
    if padded != dims {
        out = out.crop(lead, dims);
    }
    out.spacing = volume.spacing();
    Ok((out, stats))
}

/// Mean filter over a `kernel³` cube (zero padding, divisor `kernel³`) per
/// class, followed by argmax or a 0.5 threshold.
pub fn postprocess(probs: &ProbVolume, kernel: usize) -> Result<LabelVolume> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("smoothing kernel {kernel} must be odd")));
    }
    let smoothed = smooth(probs, kernel);
    Ok(smoothed.argmax())
}

fn smooth(probs: &ProbVolume, kernel: usize) -> ProbVolume {
    let r = kernel / 2;
    let dims = probs.dims;
    let c = probs.channels;
    let mut buf: Vec<f64> = probs.data.iter().map(|&v| f64::from(v)).collect();
    for axis in 0..3 {
        let stride = [1, dims[0], dims[0] * dims[1]][axis] * c;
        let n = dims[axis];
        let src = buf.clone();
        for (i, out) in buf.iter_mut().enumerate() {
            let pos = (i / stride) % n;
            let base = i - pos * stride;
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(n - 1);
            *out = (lo..=hi).map(|p| src[base + p * stride]).sum();
        }
    }
    let div = (kernel * kernel * kernel) as f64;
    ProbVolume { dims, spacing: probs.spacing, channels: c, data: buf.iter().map(|&v| (v / div) as f32).collect() }
}

/// Sliding-window sparse prediction followed by smoothing and argmax.
pub fn segment<T: Scalar>(
    model: &ImplicitUNet<T>,
    volume: &ImageVolume,
    patch_size: [usize; 3],
    cfg: &InferenceConfig,
) -> Result<(LabelVolume, ProbVolume, PredictionStats)> {
    check_patch_dims(patch_size)?;
    let predictor = SparsePredictor { model, config: cfg.clone() };
    let (probs, stats) = sliding_window(&predictor, volume, patch_size, cfg)?;
    let labels = postprocess(&probs, cfg.smooth_kernel)?;
    Ok((labels, probs, stats))
}
