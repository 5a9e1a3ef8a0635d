//! Forward and backward kernels on raw buffers. The autodiff graph records
//! calls to these; inference code reaches them through the same graph.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output extent of a strided window along one axis, `None` if the padded
/// input is shorter than the window.
pub fn window_out_extent(d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = d + 2 * pad;
    (stride >= 1 && k >= 1 && span >= k).then(|| (span - k) / stride + 1)
}

/// Shape bookkeeping for one 3D convolution or pooling window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[D, H, W]` of the input.
    pub input: [usize; 3],
    /// `[D, H, W]` of the output.
    pub output: [usize; 3],
}

impl WindowGeometry {
    pub fn new(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {kernel} and stride {stride} must be positive"
            )));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = window_out_extent(input[axis], kernel, stride, pad)
                .filter(|&e| e > 0)
                .ok_or_else(|| {
                    Error::Shape(format!(
                        "non-positive output extent for input {input:?}, kernel {kernel}, stride {stride}, pad {pad}"
                    ))
                })?;
        }
        Ok(Self { kernel, stride, pad, input, output })
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    /// Input index along one axis for output position `o` and tap `t`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn tap(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Visits every (output voxel, input voxel) pair of the window for tap
    /// `(tz, ty, tx)`, skipping padded positions.
    #[inline]
    fn for_each_tap(&self, tz: usize, ty: usize, tx: usize, mut f: impl FnMut(usize, usize)) {
        let [_, hi, wi] = self.input;
        let [dout, hout, wout] = self.output;
        for oz in 0..dout {
            let Some(iz) = self.tap(0, oz, tz) else { continue };
            for oy in 0..hout {
                let Some(iy) = self.tap(1, oy, ty) else { continue };
                let obase = (oz * hout + oy) * wout;
                let ibase = (iz * hi + iy) * wi;
                for ox in 0..wout {
                    if let Some(ix) = self.tap(2, ox, tx) {
                        f(obase + ox, ibase + ix);
                    }
                }
            }
        }
    }
}

/// Patch-matrix expansion of one `C × D × H × W` input: rows are
/// `(channel, kz, ky, kx)`, columns are output voxels.
fn im2col<T: Scalar>(input: &[T], channels: usize, g: &WindowGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let p = g.out_voxels();
    let vin = g.in_voxels();
    cols.fill(T::zero());
    for c in 0..channels {
        let src = &input[c * vin..(c + 1) * vin];
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    let row = ((c * k + tz) * k + ty) * k + tx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    g.for_each_tap(tz, ty, tx, |o, i| dst[o] = src[i]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], channels: usize, g: &WindowGeometry, grad_input: &mut [T]) {
    let k = g.kernel;
    let p = g.out_voxels();
    let vin = g.in_voxels();
    for c in 0..channels {
        let dst = &mut grad_input[c * vin..(c + 1) * vin];
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    let row = ((c * k + tz) * k + ty) * k + tx;
                    let src = &cols[row * p..(row + 1) * p];
                    g.for_each_tap(tz, ty, tx, |o, i| dst[i] += src[o]);
                }
            }
        }
    }
}

/// `out[n] = weight · im2col(input[n]) + bias` for each batch item.
///
/// `input` is `N × C_in × D × H × W`, `weight` is `C_out × C_in × k³`.
pub fn conv3d_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    in_ch: usize,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    g: &WindowGeometry,
) -> Vec<T> {
    let rows = in_ch * g.kernel.pow(3);
    let p = g.out_voxels();
    let vin = g.in_voxels();
    let mut cols = vec![T::zero(); rows * p];
    let mut out = vec![T::zero(); batch * out_ch * p];
    for n in 0..batch {
        im2col(&input[n * in_ch * vin..(n + 1) * in_ch * vin], in_ch, g, &mut cols);
        let dst = &mut out[n * out_ch * p..(n + 1) * out_ch * p];
        for (o, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias[o]);
        }
        T::gemm(out_ch, rows, p, weight, (rows, 1), &cols, (p, 1), T::one(), dst, (p, 1));
    }
    out
}

pub struct Conv3dGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    in_ch: usize,
    weight: &[T],
    out_ch: usize,
    g: &WindowGeometry,
    grad_out: &[T],
    need_input_grad: bool,
) -> Conv3dGrads<T> {
    let rows = in_ch * g.kernel.pow(3);
    let p = g.out_voxels();
    let vin = g.in_voxels();
    let mut cols = vec![T::zero(); rows * p];
    let mut dcols = vec![T::zero(); rows * p];
    let mut gw = vec![T::zero(); out_ch * rows];
    let mut gb = vec![T::zero(); out_ch];
    let mut gi = need_input_grad.then(|| vec![T::zero(); batch * in_ch * vin]);
    for n in 0..batch {
        let go = &grad_out[n * out_ch * p..(n + 1) * out_ch * p];
        for (o, chunk) in go.chunks(p).enumerate() {
            gb[o] += chunk.iter().copied().sum::<T>();
        }
        im2col(&input[n * in_ch * vin..(n + 1) * in_ch * vin], in_ch, g, &mut cols);
        // dW += dOut · colsᵀ
        T::gemm(out_ch, p, rows, go, (p, 1), &cols, (1, p), T::one(), &mut gw, (rows, 1));
        if let Some(gi) = gi.as_mut() {
            // dcols = Wᵀ · dOut
            T::gemm(rows, out_ch, p, weight, (1, rows), go, (p, 1), T::zero(), &mut dcols, (p, 1));
            col2im_add(&dcols, in_ch, g, &mut gi[n * in_ch * vin..(n + 1) * in_ch * vin]);
        }
    }
    Conv3dGrads { input: gi, weight: gw, bias: gb }
}

/// Zero-padded mean pooling with divisor `kernel³`; `planes` is `N·C`.
pub fn avg_pool3d_forward<T: Scalar>(input: &[T], planes: usize, g: &WindowGeometry) -> Vec<T> {
    let k = g.kernel;
    let scale = T::one() / T::lit(k.pow(3) as f64);
    let (vin, vout) = (g.in_voxels(), g.out_voxels());
    let mut out = vec![T::zero(); planes * vout];
    for pl in 0..planes {
        let src = &input[pl * vin..(pl + 1) * vin];
        let dst = &mut out[pl * vout..(pl + 1) * vout];
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    g.for_each_tap(tz, ty, tx, |o, i| dst[o] += src[i]);
                }
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    out
}

pub fn avg_pool3d_backward<T: Scalar>(grad_out: &[T], planes: usize, g: &WindowGeometry) -> Vec<T> {
    let k = g.kernel;
    let scale = T::one() / T::lit(k.pow(3) as f64);
    let (vin, vout) = (g.in_voxels(), g.out_voxels());
    let mut gi = vec![T::zero(); planes * vin];
    for pl in 0..planes {
        let src = &grad_out[pl * vout..(pl + 1) * vout];
        let dst = &mut gi[pl * vin..(pl + 1) * vin];
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    g.for_each_tap(tz, ty, tx, |o, i| dst[i] += src[o] * scale);
                }
            }
        }
    }
    gi
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-plane standardization (no affine). Returns the normalized values and
/// the reciprocal standard deviation of each plane.
pub fn instance_norm_forward<T: Scalar>(input: &[T], planes: usize) -> (Vec<T>, Vec<T>) {
    let s = input.len() / planes.max(1);
    let eps = T::lit(INSTANCE_NORM_EPS);
    let inv_s = T::one() / T::lit(s as f64);
    let mut out = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(planes);
    for (src, dst) in input.chunks(s).zip(out.chunks_mut(s)) {
        let mean = src.iter().copied().sum::<T>() * inv_s;
        let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_s;
        let r = T::one() / (var + eps).sqrt();
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = (x - mean) * r;
        }
        inv_std.push(r);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(normalized: &[T], inv_std: &[T], grad_out: &[T]) -> Vec<T> {
    let planes = inv_std.len();
    let s = normalized.len() / planes.max(1);
    let inv_s = T::one() / T::lit(s as f64);
    let mut gi = vec![T::zero(); normalized.len()];
    for pl in 0..planes {
        let y = &normalized[pl * s..(pl + 1) * s];
        let dy = &grad_out[pl * s..(pl + 1) * s];
        let mean_dy = dy.iter().copied().sum::<T>() * inv_s;
        let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() * inv_s;
        for i in 0..s {
            gi[pl * s + i] = inv_std[pl] * (dy[i] - mean_dy - y[i] * mean_dyy);
        }
    }
    gi
}

/// Smoothing constant of the soft-Dice term.
pub const DICE_EPS: f64 = 1e-5;

/// Result of the fused soft-Dice + cross-entropy loss.
#[derive(Clone, Debug)]
pub struct DiceCeParts {
    pub dice: f64,
    pub ce: f64,
    /// Per-point class probabilities, `n × channels` (sigmoid when one channel).
    pub probs: Vec<f64>,
}

impl DiceCeParts {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probabilities for one row of logits: softmax for ≥2 channels, logistic
/// sigmoid for a single channel.
pub fn row_probabilities(logits: &[f64], out: &mut [f64]) {
    if logits.len() == 1 {
        out[0] = sigmoid_f64(logits[0]);
        return;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Foreground channels scored by the Dice term and the one-hot target of
/// channel `j` for class `t`.
fn onehot(channels: usize, j: usize, t: usize) -> f64 {
    let class = if channels == 1 { 1 } else { j };
    if t == class {
        1.0
    } else {
        0.0
    }
}

fn fg_channels(channels: usize) -> std::ops::Range<usize> {
    if channels == 1 {
        0..1
    } else {
        1..channels
    }
}

/// Number of distinct target classes a head with `channels` outputs accepts.
pub fn class_count(channels: usize) -> usize {
    channels.max(2)
}

pub fn dice_ce_forward<T: Scalar>(logits: &[T], channels: usize, targets: &[usize]) -> Result<DiceCeParts> {
    let n = targets.len();
    if logits.len() != n * channels || channels == 0 {
        return Err(Error::Shape(format!(
            "loss expects {n}×{channels} logits, got {} values",
            logits.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= class_count(channels)) {
        return Err(Error::InvalidArgument(format!(
            "target {bad} out of range for {} classes",
            class_count(channels)
        )));
    }
    let mut probs = vec![0.0; n * channels];
    let mut row = vec![0.0; channels];
    let mut ce = 0.0;
    for i in 0..n {
        for (r, &z) in row.iter_mut().zip(&logits[i * channels..(i + 1) * channels]) {
            *r = z.to_f64_lossy();
        }
        row_probabilities(&row, &mut probs[i * channels..(i + 1) * channels]);
        let t = targets[i];
        ce += if channels == 1 {
            // log(1 + e^z) − y·z, stable form
            let z = row[0];
            z.max(0.0) - z * (t as f64) + (-z.abs()).exp().ln_1p()
        } else {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            lse - row[t]
        };
    }
    if n > 0 {
        ce /= n as f64;
    }
    let fg = fg_channels(channels);
    let nfg = fg.len() as f64;
    let mut dice = 0.0;
    for j in fg {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = probs[i * channels + j];
            let y = onehot(channels, j, targets[i]);
            inter += p * y;
            psum += p;
            ysum += y;
        }
        dice += 1.0 - (2.0 * inter + DICE_EPS) / (psum + ysum + DICE_EPS);
    }
    dice /= nfg;
    Ok(DiceCeParts { dice, ce, probs })
}

/// Gradient of `upstream · (dice + ce)` with respect to the logits.
pub fn dice_ce_backward<T: Scalar>(parts: &DiceCeParts, channels: usize, targets: &[usize], upstream: T) -> Vec<T> {
    let n = targets.len();
    let probs = &parts.probs;
    let up = upstream.to_f64_lossy();
    // d(dice)/d(prob), zero on the background channel
    let mut gp = vec![0.0; n * channels];
    let fg = fg_channels(channels);
    let nfg = fg.len() as f64;
    for j in fg {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = probs[i * channels + j];
            let y = onehot(channels, j, targets[i]);
            inter += p * y;
            psum += p;
            ysum += y;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + ysum + DICE_EPS;
        for i in 0..n {
            let y = onehot(channels, j, targets[i]);
            gp[i * channels + j] = -(2.0 * y * den - num) / (den * den) / nfg;
        }
    }
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let mut out = vec![T::zero(); n * channels];
    for i in 0..n {
        let p = &probs[i * channels..(i + 1) * channels];
        let g = &gp[i * channels..(i + 1) * channels];
        let t = targets[i];
        if channels == 1 {
            let y = t as f64;
            let dz = g[0] * p[0] * (1.0 - p[0]) + (p[0] - y) * inv_n;
            out[i] = T::lit(up * dz);
        } else {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..channels {
                let y = if t == j { 1.0 } else { 0.0 };
                let dz = p[j] * (g[j] - dot) + (p[j] - y) * inv_n;
                out[i * channels + j] = T::lit(up * dz);
            }
        }
    }
    out
}
