//! Point coordinates, multi-resolution feature gathering and
//! boundary-biased point sampling.
//!
//! Points live in continuous patch voxel units `[0, d − 1]` per axis. A
//! point's feature vector at block `b` is read from cell
//! `⌊c⌋ >> b` of that block's map, so features are piecewise constant while
//! the decoder still sees the continuous coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherIndex, Graph, Var};
use crate::data::LabelVolume;
use crate::encoder::{FeaturePyramid, PyramidVars};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps voxel coordinates to `[−1, 1]` per axis: voxel 0 ↦ −1, voxel
/// `d − 1` ↦ +1.
pub fn normalize_coords(voxel_coords: &[[f64; 3]], dims: [usize; 3]) -> Result<Vec<[f64; 3]>> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!("extents {dims:?} must be at least 2 to normalize")));
    }
    let scale: [f64; 3] = std::array::from_fn(|a| 2.0 / (dims[a] - 1) as f64);
    Ok(voxel_coords.iter().map(|p| std::array::from_fn(|a| p[a] * scale[a] - 1.0)).collect())
}

/// Cell of block `block` (1-based) that contains `coord`.
fn block_cell(coord: [f64; 3], block: usize, dims: [usize; 3]) -> Result<[usize; 3]> {
    let mut cell = [0; 3];
    for a in 0..3 {
        let c = coord[a];
        if !(c >= 0.0 && c < dims[a] as f64) {
            return Err(Error::OutOfBounds { coord: coord.map(|v| v as f32), dims });
        }
        cell[a] = (c.floor() as usize) >> block;
    }
    Ok(cell)
}

/// Gather locations in every block for each `(batch item, point)`.
fn gather_indices(points: &[(usize, [f64; 3])], dims: [usize; 3], blocks: usize) -> Result<Vec<Vec<GatherIndex>>> {
    (1..=blocks)
        .map(|b| {
            points
                .iter()
                .map(|&(batch, p)| Ok(GatherIndex { batch, cell: block_cell(p, b, dims)? }))
                .collect()
        })
        .collect()
}

impl PyramidVars {
    /// Concatenated per-block features for `(batch item, voxel coordinate)`
    /// pairs, as an `n × D_total` node.
    pub fn gather<T: Scalar>(&self, g: &mut Graph<T>, points: &[(usize, [f64; 3])]) -> Result<Var> {
        let idx = gather_indices(points, self.patch_dims, self.maps.len())?;
        let parts = self.maps.iter().zip(&idx).map(|(&m, i)| g.gather(m, i)).collect::<Result<Vec<_>>>()?;
        g.concat_cols(&parts)
    }
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Feature rows of points in batch item 0 (`n × D_total`).
    pub fn gather(&self, voxel_coords: &[[f64; 3]]) -> Result<Tensor<T>> {
        let points: Vec<(usize, [f64; 3])> = voxel_coords.iter().map(|&p| (0, p)).collect();
        self.gather_batched(&points)
    }

    pub fn gather_batched(&self, points: &[(usize, [f64; 3])]) -> Result<Tensor<T>> {
        let idx = gather_indices(points, self.patch_dims, self.maps.len())?;
        let width = self.total_channels();
        let mut out = vec![T::zero(); points.len() * width];
        let mut col = 0;
        for (map, cells) in self.maps.iter().zip(&idx) {
            let [n, c, d, h, w] = map.dims5()?;
            let plane = d * h * w;
            for (row, gi) in cells.iter().enumerate() {
                let [x, y, z] = gi.cell;
                if gi.batch >= n || x >= w || y >= h || z >= d {
                    return Err(Error::Shape(format!("cell {gi:?} outside map {:?}", map.shape())));
                }
                let base = gi.batch * c * plane + (z * h + y) * w + x;
                for ch in 0..c {
                    out[row * width + col + ch] = map.data()[base + ch * plane];
                }
            }
            col += c;
        }
        Tensor::from_vec(&[points.len(), width], out)
    }
}

/// Voxels with at least one 6-neighbor (inside the volume) of a different
/// label, as `(x, y, z)` in x-fastest order.
pub fn extract_boundary(labels: &LabelVolume) -> Vec<[usize; 3]> {
    let [w, h, d] = labels.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = labels.get(x, y, z);
                let differs = (x > 0 && labels.get(x - 1, y, z) != v)
                    || (x + 1 < w && labels.get(x + 1, y, z) != v)
                    || (y > 0 && labels.get(x, y - 1, z) != v)
                    || (y + 1 < h && labels.get(x, y + 1, z) != v)
                    || (z > 0 && labels.get(x, y, z - 1) != v)
                    || (z + 1 < d && labels.get(x, y, z + 1) != v);
                if differs {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Points per patch.
    pub k: usize,
    /// Fraction of points drawn near the label boundary.
    pub alpha: f64,
    /// Standard deviation (voxels) of the boundary displacement.
    pub sigma: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { k: 30_000, alpha: 0.5, sigma: 5.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma {} must be non-negative", self.sigma)));
        }
        Ok(())
    }

    /// `⌈k · α⌉`, robust to representation error in `α`.
    pub fn boundary_count(&self) -> usize {
        ((self.k as f64 * self.alpha) - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Boundary,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch {
    pub voxel_coords: Vec<[f64; 3]>,
    pub norm_coords: Vec<[f64; 3]>,
    pub targets: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_coords.is_empty()
    }
}

/// Label of the voxel nearest to `p` (round half up, clamped).
pub fn nearest_label(labels: &LabelVolume, p: [f64; 3]) -> u8 {
    let dims = labels.dims();
    let idx: [usize; 3] = std::array::from_fn(|a| ((p[a] + 0.5).floor().max(0.0) as usize).min(dims[a] - 1));
    labels.get(idx[0], idx[1], idx[2])
}

/// Draws `k` training points: `⌈k·α⌉` boundary voxels (with replacement)
/// displaced by `N(0, σ²I)` and clamped into the patch, the rest uniform over
/// the patch. Without a boundary every point is uniform.
pub fn sample_points(labels: &LabelVolume, cfg: &SamplerConfig, seed: u64) -> Result<PointBatch> {
    cfg.validate()?;
    let dims = labels.dims();
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot sample points from an empty patch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boundary = extract_boundary(labels);
    let n_boundary = if boundary.is_empty() { 0 } else { cfg.boundary_count().min(cfg.k) };
    let upper: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64);
    let displacement = Normal::new(0.0, cfg.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut voxel_coords = Vec::with_capacity(cfg.k);
    let mut provenance = Vec::with_capacity(cfg.k);
    for _ in 0..n_boundary {
        let v = boundary[rng.random_range(0..boundary.len())];
        let p = std::array::from_fn(|a| (v[a] as f64 + displacement.sample(&mut rng)).clamp(0.0, upper[a]));
        voxel_coords.push(p);
        provenance.push(Provenance::Boundary);
    }
    for _ in n_boundary..cfg.k {
        let p = std::array::from_fn(|a| if upper[a] > 0.0 { rng.random_range(0.0..=upper[a]) } else { 0.0 });
        voxel_coords.push(p);
        provenance.push(Provenance::Uniform);
    }
    let targets = voxel_coords.iter().map(|&p| usize::from(nearest_label(labels, p))).collect();
    let norm_coords = normalize_coords(&voxel_coords, dims)?;
    Ok(PointBatch { voxel_coords, norm_coords, targets, provenance })
}
