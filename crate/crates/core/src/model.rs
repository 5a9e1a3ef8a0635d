//! The full network: encoder, feature gather and implicit decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::ImageVolume;
use crate::decoder::{positional_encode, probabilities, DecoderConfig, DecoderParams, DecoderVars};
use crate::encoder::{check_patch_dims, EncoderConfig, EncoderParams, EncoderVars, FeaturePyramid};
use crate::error::{Error, Result};
use crate::points::normalize_coords;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// Points decoded per graph during inference.
pub const DECODE_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), decoder: DecoderConfig::default() }
    }
}

impl ModelConfig {
    /// Desk-scale architecture with the given decoder width and classes.
    pub fn with(block_channels: [usize; 4], hidden: usize, num_classes: usize) -> Self {
        let encoder = EncoderConfig { block_channels, ..Default::default() };
        let decoder = DecoderConfig {
            feature_channels: encoder.total_channels(),
            hidden,
            num_classes,
            ..Default::default()
        };
        Self { encoder, decoder }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.feature_channels != self.encoder.total_channels() {
            return Err(Error::Config(format!(
                "decoder expects {} feature channels, encoder produces {}",
                self.decoder.feature_channels,
                self.encoder.total_channels()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitUNet<T> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Scalar> ImplicitUNet<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: EncoderParams::init(&config.encoder, seed::derive(seed, &[0xE1]))?,
            decoder: DecoderParams::init(&config.decoder, seed::derive(seed, &[0xDE]))?,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { encoder: EncoderParams::zeros(&config.encoder)?, decoder: DecoderParams::zeros(&config.decoder)? })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.config.clone(), decoder: self.decoder.config.clone() }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.config.num_classes
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let enc = self.encoder.named_tensors().into_iter().map(|(n, t)| (format!("encoder.{n}"), t));
        let dec = self.decoder.named_tensors().into_iter().map(|(n, t)| (format!("decoder.{n}"), t));
        enc.chain(dec).collect()
    }

    /// Same order as [`ImplicitUNet::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Encoder forward on one single-channel patch.
    pub fn encode(&self, patch: &ImageVolume) -> Result<FeaturePyramid<T>> {
        self.encoder.forward(&stack_patches(&[patch])?)
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        ModelVars { encoder: self.encoder.bind(g, trainable), decoder: self.decoder.bind(g, trainable) }
    }

    /// Evaluation-mode class probabilities (`n × C`, row-major) at voxel
    /// coordinates of an encoded single patch.
    pub fn decode_points(&self, pyramid: &FeaturePyramid<T>, voxel_coords: &[[f64; 3]]) -> Result<Vec<f32>> {
        let c = self.num_classes();
        let mut out = Vec::with_capacity(voxel_coords.len() * c);
        for chunk in voxel_coords.chunks(DECODE_CHUNK) {
            let feats = pyramid.gather(chunk)?;
            let norm = normalize_coords(chunk, pyramid.patch_dims)?;
            let mut g = Graph::new();
            let fv = g.constant(feats);
            let inputs = point_inputs(&mut g, fv, &norm, self.decoder.config.levels)?;
            let dv = self.decoder.bind(&mut g, false);
            let logits = dv.forward(&mut g, inputs, false, 0)?;
            out.extend(probabilities(g.value(logits))?);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ImplicitUNet<U> {
        let mut out = ImplicitUNet::<U>::zeros(&self.config()).expect("valid config");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Decoder input rows `[features ‖ normalized xyz ‖ encoding]`.
pub fn point_inputs<T: Scalar>(g: &mut Graph<T>, features: Var, norm_coords: &[[f64; 3]], levels: usize) -> Result<Var> {
    let n = norm_coords.len();
    let raw: Vec<T> = norm_coords.iter().flat_map(|p| p.map(T::lit)).collect();
    let coords = g.constant(Tensor::from_vec(&[n, 3], raw)?);
    let enc = g.constant(positional_encode(norm_coords, levels));
    g.concat_cols(&[features, coords, enc])
}

/// Model parameters registered in a graph.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl ModelVars {
    /// Reuses existing leaves, ordered as [`ImplicitUNet::named_tensors`].
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let n_enc = config.encoder.layer_plan().len() * 2;
        if vars.len() < n_enc {
            return Err(Error::Shape(format!("model needs at least {n_enc} leaves, got {}", vars.len())));
        }
        Ok(Self {
            encoder: EncoderVars::from_vars(&config.encoder, &vars[..n_enc])?,
            decoder: DecoderVars::from_vars(&config.decoder, &vars[n_enc..])?,
        })
    }

    /// Same order as [`ImplicitUNet::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }

    /// Logits at `(batch item, voxel coordinate)` points of an
    /// `N × 1 × D × H × W` input: encoder, feature gather, decoder.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        input: Var,
        points: &[(usize, [f64; 3])],
        training: bool,
        seed: u64,
    ) -> Result<Var> {
        let pyramid = self.encoder.forward(g, input)?;
        let feats = pyramid.gather(g, points)?;
        let voxels: Vec<[f64; 3]> = points.iter().map(|&(_, p)| p).collect();
        let norm = normalize_coords(&voxels, pyramid.patch_dims)?;
        let inputs = point_inputs(g, feats, &norm, self.decoder.levels())?;
        self.decoder.forward(g, inputs, training, seed)
    }
}

/// Stacks single-channel patches of equal extents into `N × 1 × D × H × W`.
pub fn stack_patches<T: Scalar>(patches: &[&ImageVolume]) -> Result<Tensor<T>> {
    let first = patches.first().ok_or_else(|| Error::InvalidArgument("no patches to stack".into()))?;
    let dims = first.dims();
    check_patch_dims(dims)?;
    let mut data = Vec::with_capacity(patches.len() * first.len());
    for p in patches {
        if p.dims() != dims {
            return Err(Error::Shape(format!("patch {:?} differs from {dims:?}", p.dims())));
        }
        data.extend(p.data().iter().map(|&v| T::lit(f64::from(v))));
    }
    let [w, h, d] = dims;
    Tensor::from_vec(&[patches.len(), 1, d, h, w], data)
}
