//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! inputs precede it, so reverse insertion order is a valid topological order
//! for the backward sweep. Only the primitives the model needs are provided.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, DiceCeParts, WindowGeometry};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Location of one gathered feature vector: batch item and `(x, y, z)` cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatherIndex {
    pub batch: usize,
    pub cell: [usize; 3],
}

enum Op<T> {
    Leaf,
    Conv3d { input: Var, weight: Var, bias: Var, geom: WindowGeometry },
    AvgPool3d { input: Var, geom: WindowGeometry },
    InstanceNorm { input: Var, inv_std: Vec<T> },
    Activation { input: Var, kind: Activation },
    Dropout { input: Var, mask: Vec<T> },
    DenseWn { input: Var, direction: Var, gain: Var, bias: Var, norms: Vec<T>, weight: Vec<T> },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    ConcatCols { parts: Vec<Var> },
    Gather { map: Var, offsets: Vec<usize>, plane: usize },
    DiceCe { logits: Var, targets: Vec<usize>, parts: DiceCeParts },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; [`Graph::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 3D convolution of an `N × C_in × D × H × W` input with a
    /// `C_out × C_in × k × k × k` kernel.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, d, h, w] = self.value(input).dims5()?;
        let [cout, wcin, kd, kh, kw] = self.value(weight).dims5()?;
        if wcin != cin {
            return Err(Error::Shape(format!("conv3d: input has {cin} channels, weight expects {wcin}")));
        }
        if kd != kh || kh != kw {
            return Err(Error::Shape("conv3d: only cubic kernels are supported".into()));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv3d: bias shape {:?}, expected [{cout}]",
                self.value(bias).shape()
            )));
        }
        let geom = WindowGeometry::new([d, h, w], kd, stride, pad)?;
        let out = kernels::conv3d_forward(
            self.value(input).data(),
            n,
            cin,
            self.value(weight).data(),
            self.value(bias).data(),
            cout,
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let value = Tensor::from_vec(&[n, cout, od, oh, ow], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Conv3d { input, weight, bias, geom }))
    }

    /// Zero-padded 3D mean pooling with divisor `kernel³`.
    pub fn avg_pool3d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, d, h, w] = self.value(input).dims5()?;
        let geom = WindowGeometry::new([d, h, w], kernel, stride, pad)?;
        let out = kernels::avg_pool3d_forward(self.value(input).data(), n * c, &geom);
        let [od, oh, ow] = geom.output;
        let value = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::AvgPool3d { input, geom }))
    }

    /// Per-(item, channel) standardization over the spatial axes.
    pub fn instance_norm(&mut self, input: Var) -> Result<Var> {
        let [n, c, ..] = self.value(input).dims5()?;
        let (out, inv_std) = kernels::instance_norm_forward(self.value(input).data(), n * c);
        let value = Tensor::from_vec(self.value(input).shape(), out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::InstanceNorm { input, inv_std }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.value(input).map(|x| x.max(T::zero())),
            Activation::LeakyRelu(slope) => {
                if !(0.0..1.0).contains(&slope) {
                    return Err(Error::InvalidArgument(format!("leaky relu slope {slope} outside [0, 1)")));
                }
                let s = T::lit(slope);
                self.value(input).map(|x| if x > T::zero() { x } else { x * s })
            }
            Activation::Sigmoid => self.value(input).map(|x| T::one() / (T::one() + (-x).exp())),
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Activation { input, kind }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 − rate)` so that
    /// evaluation mode is the identity.
    pub fn dropout(&mut self, input: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.value(input).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_vec(self.value(input).shape(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Dropout { input, mask }))
    }

    /// Weight-normalized affine map: row `u` of the effective weight is
    /// `gain[u] · direction[u] / ‖direction[u]‖`.
    pub fn dense_weightnorm(&mut self, input: Var, direction: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(input).dims2()?;
        let (units, vf) = self.value(direction).dims2()?;
        if vf != f {
            return Err(Error::Shape(format!("dense: input width {f}, layer expects {vf}")));
        }
        if self.value(gain).shape() != [units] || self.value(bias).shape() != [units] {
            return Err(Error::Shape(format!("dense: gain/bias must have shape [{units}]")));
        }
        let v = self.value(direction).data();
        let g = self.value(gain).data();
        let mut norms = Vec::with_capacity(units);
        let mut weight = vec![T::zero(); units * f];
        for u in 0..units {
            let row = &v[u * f..(u + 1) * f];
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::ZeroNormDirection { row: u });
            }
            let scale = g[u] / norm;
            for (w, &x) in weight[u * f..(u + 1) * f].iter_mut().zip(row) {
                *w = x * scale;
            }
            norms.push(norm);
        }
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * units];
        for row in out.chunks_mut(units) {
            row.copy_from_slice(b);
        }
        T::gemm(n, f, units, self.value(input).data(), (f, 1), &weight, (1, f), T::one(), &mut out, (units, 1));
        let value = Tensor::from_vec(&[n, units], out)?;
        let rg = self.any_grad(&[input, direction, gain, bias]);
        Ok(self.push(value, rg, Op::DenseWn { input, direction, gain, bias, norms, weight }))
    }

    /// Plain matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if k != kb {
            return Err(Error::Shape(format!("matmul: {m}×{k} by {kb}×{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), T::zero(), &mut out, (n, 1));
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Matmul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let value = Tensor::from_vec(&[rows, total], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Picks the `C`-channel feature vector at each index of an
    /// `N × C × D × H × W` map, giving an `n × C` matrix.
    pub fn gather(&mut self, map: Var, indices: &[GatherIndex]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(map).dims5()?;
        let plane = d * h * w;
        let mut offsets = Vec::with_capacity(indices.len());
        for gi in indices {
            let [x, y, z] = gi.cell;
            if gi.batch >= n || x >= w || y >= h || z >= d {
                return Err(Error::Shape(format!(
                    "gather index {gi:?} outside map of shape {:?}",
                    self.value(map).shape()
                )));
            }
            offsets.push(gi.batch * c * plane + (z * h + y) * w + x);
        }
        let src = self.value(map).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &off in &offsets {
            out.extend((0..c).map(|ch| src[off + ch * plane]));
        }
        let value = Tensor::from_vec(&[indices.len(), c], out)?;
        let rg = self.any_grad(&[map]);
        Ok(self.push(value, rg, Op::Gather { map, offsets, plane }))
    }

    /// Soft-Dice plus cross-entropy over `n × C` logits; returns the scalar
    /// loss node and the two terms.
    pub fn dice_ce_loss(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, DiceCeParts)> {
        let (n, c) = self.value(logits).dims2()?;
        if n != targets.len() {
            return Err(Error::Shape(format!("loss: {n} logit rows, {} targets", targets.len())));
        }
        let parts = kernels::dice_ce_forward(self.value(logits).data(), c, targets)?;
        let value = Tensor::scalar(T::lit(parts.total()));
        let rg = self.any_grad(&[logits]);
        let var = self.push(value, rg, Op::DiceCe { logits, targets: targets.to_vec(), parts: parts.clone() });
        Ok((var, parts))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(node, &gout, &mut grads)?;
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if self.nodes[v.0].requires_grad {
            let g = Tensor::from_vec(self.value(v).shape(), data)?;
            self.accumulate(grads, v, g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, weight, bias, geom } => {
                let [n, cin, ..] = self.value(*input).dims5()?;
                let cout = self.value(*weight).shape()[0];
                let g = kernels::conv3d_backward(
                    self.value(*input).data(),
                    n,
                    cin,
                    self.value(*weight).data(),
                    cout,
                    geom,
                    go,
                    self.requires_grad(*input),
                );
                if let Some(gi) = g.input {
                    self.accumulate_vec(grads, *input, gi)?;
                }
                self.accumulate_vec(grads, *weight, g.weight)?;
                self.accumulate_vec(grads, *bias, g.bias)?;
            }
            Op::AvgPool3d { input, geom } => {
                let [n, c, ..] = self.value(*input).dims5()?;
                let gi = kernels::avg_pool3d_backward(go, n * c, geom);
                self.accumulate_vec(grads, *input, gi)?;
            }
            Op::InstanceNorm { input, inv_std } => {
                let gi = kernels::instance_norm_backward(node.value.data(), inv_std, go);
                self.accumulate_vec(grads, *input, gi)?;
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let gi: Vec<T> = match *kind {
                    Activation::Relu => {
                        x.iter().zip(go).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect()
                    }
                    Activation::LeakyRelu(slope) => {
                        let s = T::lit(slope);
                        x.iter().zip(go).map(|(&x, &g)| if x > T::zero() { g } else { g * s }).collect()
                    }
                    Activation::Sigmoid => y.iter().zip(go).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                };
                self.accumulate_vec(grads, *input, gi)?;
            }
            Op::Dropout { input, mask } => {
                let gi = go.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate_vec(grads, *input, gi)?;
            }
            Op::DenseWn { input, direction, gain, bias, norms, weight } => {
                let (n, f) = self.value(*input).dims2()?;
                let units = norms.len();
                if self.requires_grad(*input) {
                    let mut gi = vec![T::zero(); n * f];
                    T::gemm(n, units, f, go, (units, 1), weight, (f, 1), T::zero(), &mut gi, (f, 1));
                    self.accumulate_vec(grads, *input, gi)?;
                }
                let mut gb = vec![T::zero(); units];
                for row in go.chunks(units) {
                    for (b, &g) in gb.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                self.accumulate_vec(grads, *bias, gb)?;
                if self.requires_grad(*direction) || self.requires_grad(*gain) {
                    // gradient of the effective weight: dYᵀ · X
                    let mut gw = vec![T::zero(); units * f];
                    T::gemm(units, n, f, go, (1, units), self.value(*input).data(), (f, 1), T::zero(), &mut gw, (f, 1));
                    let v = self.value(*direction).data();
                    let g = self.value(*gain).data();
                    let mut gg = vec![T::zero(); units];
                    let mut gv = vec![T::zero(); units * f];
                    for u in 0..units {
                        let vr = &v[u * f..(u + 1) * f];
                        let wr = &gw[u * f..(u + 1) * f];
                        let norm = norms[u];
                        let dg = wr.iter().zip(vr).map(|(&a, &b)| a * b).sum::<T>() / norm;
                        gg[u] = dg;
                        let s = g[u] / norm;
                        for j in 0..f {
                            gv[u * f + j] = s * (wr[j] - dg * vr[j] / norm);
                        }
                    }
                    self.accumulate_vec(grads, *gain, gg)?;
                    self.accumulate_vec(grads, *direction, gv)?;
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, go, (n, 1), self.value(*b).data(), (1, n), T::zero(), &mut ga, (k, 1));
                    self.accumulate_vec(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), (1, k), go, (n, 1), T::zero(), &mut gb, (n, 1));
                    self.accumulate_vec(grads, *b, gb)?;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = go.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let gb = go.iter().zip(va).map(|(&g, &x)| g * x).collect();
                self.accumulate_vec(grads, *a, ga)?;
                self.accumulate_vec(grads, *b, gb)?;
            }
            Op::Sum { input } => {
                let g = Tensor::full(self.value(*input).shape(), go[0]);
                self.accumulate(grads, *input, g);
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = node.value.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&go[r * total + col..r * total + col + w]);
                        }
                        self.accumulate_vec(grads, p, gp)?;
                    }
                    col += w;
                }
            }
            Op::Gather { map, offsets, plane } => {
                let c = node.value.shape()[1];
                let mut gm = vec![T::zero(); self.value(*map).numel()];
                for (i, &off) in offsets.iter().enumerate() {
                    for ch in 0..c {
                        gm[off + ch * plane] += go[i * c + ch];
                    }
                }
                self.accumulate_vec(grads, *map, gm)?;
            }
            Op::DiceCe { logits, targets, parts } => {
                let c = self.value(*logits).shape()[1];
                let gl = kernels::dice_ce_backward(parts, c, targets, go[0]);
                self.accumulate_vec(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

/// Gradients from one backward sweep. Trainable leaves not reached from the
/// loss report zeros.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_block_sum_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let mut expected = vec![0.0; 8];
        for oz in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (z, y, xx) = (2 * oz + dz, 2 * oy + dy, 2 * ox + dx);
                                s += x.data()[(z * 4 + y) * 4 + xx];
                            }
                        }
                    }
                    expected[(oz * 2 + oy) * 2 + ox] = s;
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let w = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv3d(xv, w, b, 2, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2, 2]);
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv3d(x, w, b, 1, 1).is_err());
        let x1 = g.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
        assert!(g.conv3d(x1, w, b, 1, 0).is_err());
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.activation(x, Activation::Sigmoid).unwrap();
        assert_eq!(g.value(s).data()[2], 0.5);
        let l = g.constant(t(&[1], &[-2.0]));
        let lr = g.activation(l, Activation::LeakyRelu(0.01)).unwrap();
        assert!((g.value(lr).data()[0] + 0.02).abs() < 1e-15);
        assert!(g.activation(l, Activation::LeakyRelu(1.0)).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[10], 1.0));
        assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.2, false, 1).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, 1).is_err());
        let a = g.dropout(x, 0.5, true, 9).unwrap();
        let b = g.dropout(x, 0.5, true, 9).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        let y = g.dropout(x, 0.2, true, 42).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 1e5;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn avg_pool_spreads_a_spike() {
        let mut data = vec![0.0f64; 125];
        data[(2 * 5 + 2) * 5 + 2] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 5, 5, 5], &data));
        let y = g.avg_pool3d(x, 3, 1, 1).unwrap();
        for z in 0..5usize {
            for yy in 0..5usize {
                for xx in 0..5usize {
                    let v = g.value(y).data()[(z * 5 + yy) * 5 + xx];
                    let inside = [z, yy, xx].iter().all(|&c| (1..=3).contains(&c));
                    let expected = if inside { 1.0 / 27.0 } else { 0.0 };
                    assert!((v - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn avg_pool_keeps_constant_interior() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4, 4], 2.5));
        let y = g.avg_pool3d(x, 3, 1, 1).unwrap();
        for z in 1..3 {
            for yy in 1..3 {
                for xx in 1..3 {
                    assert!((g.value(y).data()[(z * 4 + yy) * 4 + xx] - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weightnorm_scale_invariance_and_plain_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[4, 7], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[3, 7], 1.0, &mut rng);
        let gain = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let run = |v: Tensor<f64>, gain: Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, vv, gv, bv) = (g.constant(x.clone()), g.constant(v), g.constant(gain), g.constant(bias.clone()));
            let y = g.dense_weightnorm(xv, vv, gv, bv).unwrap();
            g.value(y).clone()
        };
        let base = run(v.clone(), gain.clone());
        let mut scaled = v.clone();
        for e in &mut scaled.data_mut()[7..14] {
            *e *= 10.0;
        }
        for (a, b) in base.data().iter().zip(run(scaled, gain).data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let norms: Vec<f64> = v.data().chunks(7).map(|r| r.iter().map(|e| e * e).sum::<f64>().sqrt()).collect();
        let affine = run(v.clone(), t(&[3], &norms));
        for i in 0..4 {
            for u in 0..3 {
                let plain: f64 =
                    (0..7).map(|j| x.data()[i * 7 + j] * v.data()[u * 7 + j]).sum::<f64>() + bias.data()[u];
                assert!((affine.data()[i * 3 + u] - plain).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weightnorm_zero_row_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 2], 1.0));
        let v = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.dense_weightnorm(x, v, gain, b), Err(Error::ZeroNormDirection { row: 1 })));
    }

    #[test]
    fn backward_of_sum_is_ones_and_unused_param_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let unused = g.param(t(&[3], &[1.0, 1.0, 1.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 4]);
        assert_eq!(grads.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gather_picks_cells() {
        // map 1×2×2×2×2, value = channel*100 + flat voxel
        let data: Vec<f64> = (0..16).map(|i| ((i / 8) * 100 + i % 8) as f64).collect();
        let mut g = Graph::new();
        let m = g.constant(t(&[1, 2, 2, 2, 2], &data));
        let idx = [GatherIndex { batch: 0, cell: [1, 0, 1] }];
        let out = g.gather(m, &idx).unwrap();
        // (z=1, y=0, x=1) -> flat 5
        assert_eq!(g.value(out).data(), &[5.0, 105.0]);
        assert!(g.gather(m, &[GatherIndex { batch: 0, cell: [2, 0, 0] }]).is_err());
    }
}
