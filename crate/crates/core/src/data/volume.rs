use std::fmt::Debug;

use crate::error::{Error, Result};

/// On-disk voxel type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Image = 0,
    Labels = 1,
}

impl VolumeKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Image),
            1 => Some(Self::Labels),
            _ => None,
        }
    }
}

/// Element type of a [`Volume`].
pub trait Voxel: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    const KIND: VolumeKind;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Value at fraction `t ∈ [0, 1]` between two neighbors along an axis:
    /// linear for intensities, nearest (round half up) for labels.
    fn interpolate(a: Self, b: Self, t: f64) -> Self;
}

impl Voxel for f32 {
    const KIND: VolumeKind = VolumeKind::Image;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn interpolate(a: Self, b: Self, t: f64) -> Self {
        (f64::from(a) * (1.0 - t) + f64::from(b) * t) as f32
    }
}

impl Voxel for u8 {
    const KIND: VolumeKind = VolumeKind::Labels;
    const BYTES: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }

    fn interpolate(a: Self, b: Self, t: f64) -> Self {
        if t < 0.5 {
            a
        } else {
            b
        }
    }
}

/// A 3D grid with physical spacing, stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<V>,
}

pub type ImageVolume = Volume<f32>;
pub type LabelVolume = Volume<u8>;

impl<V: Voxel> Volume<V> {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<V>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("volume {dims:?} needs {n} voxels, got {}", data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], value: V) -> Self {
        Self { dims, spacing: [1.0; 3], data: vec![value; dims.iter().product()] }
    }

    /// `(W, H, D)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> V {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: V) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Inverse of [`Volume::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [w, h, _] = self.dims;
        [i % w, (i / w) % h, i / (w * h)]
    }

    /// Sub-volume starting at `origin` with extents `size`; positions
    /// outside the source read as `fill`.
    pub fn crop(&self, origin: [isize; 3], size: [usize; 3], fill: V) -> Self {
        let mut out = Vec::with_capacity(size.iter().product());
        for z in 0..size[2] {
            for y in 0..size[1] {
                for x in 0..size[0] {
                    let p = [origin[0] + x as isize, origin[1] + y as isize, origin[2] + z as isize];
                    let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a]);
                    out.push(if inside { self.get(p[0] as usize, p[1] as usize, p[2] as usize) } else { fill });
                }
            }
        }
        Self { dims: size, spacing: self.spacing, data: out }
    }

    /// Same geometry, new contents.
    pub fn map<U: Voxel>(&self, f: impl Fn(V) -> U) -> Volume<U> {
        Volume { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
