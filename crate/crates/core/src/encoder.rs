//! Strided 3D convolutional encoder producing a four-level feature pyramid.
//!
//! Every block opens with a stride-2 convolution (the pooling step) followed
//! by stride-1 convolutions, so block `b` (1-based) runs at `1/2^b` of the
//! patch resolution. All convolutions use 3³ kernels with padding 1 and are
//! followed by instance normalization and a leaky ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;
/// Convolutions in each block, the first of which has stride 2.
pub const CONVS_PER_BLOCK: [usize; NUM_BLOCKS] = [2, 2, 4, 4];
pub const KERNEL: usize = 3;
/// Patch extents must be multiples of the deepest downsampling factor.
pub const PATCH_MULTIPLE: usize = 1 << NUM_BLOCKS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub block_channels: [usize; NUM_BLOCKS],
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 1, block_channels: [16, 32, 64, 128], leaky_slope: 0.01 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.block_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder channels must be positive (in {}, blocks {:?})",
                self.in_channels, self.block_channels
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Width of the concatenated feature vector over all blocks.
    pub fn total_channels(&self) -> usize {
        self.block_channels.iter().sum()
    }

    /// `(in, out, stride)` for every convolution in order.
    pub fn layer_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut cin = self.in_channels;
        for (b, &c) in self.block_channels.iter().enumerate() {
            plan.push((cin, c, 2));
            for _ in 1..CONVS_PER_BLOCK[b] {
                plan.push((c, c, 1));
            }
            cin = c;
        }
        plan
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_plan().iter().map(|&(i, o, _)| o * i * KERNEL.pow(3) + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    /// He-style initialization (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_plan()
            .into_iter()
            .map(|(cin, cout, stride)| {
                let fan_in = cin * KERNEL.pow(3);
                ConvLayer {
                    weight: Tensor::randn(&[cout, cin, KERNEL, KERNEL, KERNEL], (2.0 / fan_in as f64).sqrt(), &mut rng),
                    bias: Tensor::zeros(&[cout]),
                    stride,
                }
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    /// Zero-filled parameters of the right shapes, used when loading.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_plan()
            .into_iter()
            .map(|(cin, cout, stride)| ConvLayer {
                weight: Tensor::zeros(&[cout, cin, KERNEL, KERNEL, KERNEL]),
                bias: Tensor::zeros(&[cout]),
                stride,
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &l.weight));
            out.push((format!("conv{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let layers = self.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias), l.stride)).collect();
        EncoderVars { layers, slope: self.config.leaky_slope }
    }

    /// Evaluates the encoder on an `N × C_in × D × H × W` batch.
    pub fn forward(&self, input: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let pv = vars.forward(&mut g, x)?;
        Ok(FeaturePyramid {
            maps: pv.maps.iter().map(|&m| g.value(m).clone()).collect(),
            patch_dims: pv.patch_dims,
        })
    }
}

/// Encoder parameters registered in a graph.
pub struct EncoderVars {
    layers: Vec<(Var, Var, usize)>,
    slope: f64,
}

impl EncoderVars {
    /// Reuses existing graph leaves, ordered as [`EncoderParams::named_tensors`].
    pub fn from_vars(config: &EncoderConfig, vars: &[Var]) -> Result<Self> {
        let plan = config.layer_plan();
        if vars.len() != plan.len() * 2 {
            return Err(Error::Shape(format!("encoder needs {} leaves, got {}", plan.len() * 2, vars.len())));
        }
        let layers = plan.iter().zip(vars.chunks(2)).map(|(&(_, _, s), wb)| (wb[0], wb[1], s)).collect();
        Ok(Self { layers, slope: config.leaky_slope })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, input: Var) -> Result<PyramidVars> {
        let [_, _, d, h, w] = g.value(input).dims5()?;
        check_patch_dims([w, h, d])?;
        let mut maps = [input; NUM_BLOCKS];
        let mut x = input;
        let mut layer = 0;
        for (b, map) in maps.iter_mut().enumerate() {
            for _ in 0..CONVS_PER_BLOCK[b] {
                let (wv, bv, stride) = self.layers[layer];
                x = g.conv3d(x, wv, bv, stride, 1)?;
                x = g.instance_norm(x)?;
                x = g.activation(x, Activation::LeakyRelu(self.slope))?;
                layer += 1;
            }
            *map = x;
        }
        Ok(PyramidVars { maps, patch_dims: [w, h, d] })
    }
}

/// Rejects patch extents that are not multiples of 16.
pub fn check_patch_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % PATCH_MULTIPLE != 0) {
        return Err(Error::Shape(format!("patch extents {dims:?} must be positive multiples of {PATCH_MULTIPLE}")));
    }
    Ok(())
}

/// Graph handles of the four block outputs.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub maps: [Var; NUM_BLOCKS],
    /// `(W, H, D)` of the encoded patch.
    pub patch_dims: [usize; 3],
}

/// Block outputs; `maps[b - 1]` has extents `patch / 2^b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub maps: Vec<Tensor<T>>,
    /// `(W, H, D)` of the encoded patch.
    pub patch_dims: [usize; 3],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn total_channels(&self) -> usize {
        self.maps.iter().map(|m| m.shape()[1]).sum()
    }

    pub fn batch(&self) -> usize {
        self.maps.first().map_or(0, |m| m.shape()[0])
    }
}
