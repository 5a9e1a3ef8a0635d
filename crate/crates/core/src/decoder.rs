//! Coordinate-conditioned implicit decoder.
//!
//! Per point the input row is `[gathered features ‖ normalized xyz ‖
//! sinusoidal encoding]`, fed through weight-normalized dense layers with
//! ReLU and dropout between them. The full input row is re-injected at
//! `skip_layer`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::row_probabilities;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Width of the gathered feature vector (sum of encoder block channels).
    pub feature_channels: usize,
    pub num_layers: usize,
    pub hidden: usize,
    /// Frequency bands of the positional encoding.
    pub levels: usize,
    /// Output logits; 1 means a single sigmoid channel.
    pub num_classes: usize,
    pub dropout: f64,
    /// Layer whose input is `[hidden ‖ original input]`; `None` disables it.
    pub skip_layer: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_channels: 240,
            num_layers: 8,
            hidden: 512,
            levels: 10,
            num_classes: 2,
            dropout: 0.2,
            skip_layer: Some(4),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.levels == 0 || self.num_classes == 0 {
            return bad(format!(
                "hidden {}, levels {} and classes {} must be positive",
                self.hidden, self.levels, self.num_classes
            ));
        }
        if self.num_layers < 2 {
            return bad(format!("decoder needs at least 2 layers, got {}", self.num_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.num_layers {
                return bad(format!("skip layer {s} must lie in 1..{}", self.num_layers));
            }
        }
        Ok(())
    }

    /// Width of one point's input row.
    pub fn input_width(&self) -> usize {
        self.feature_channels + 3 + 6 * self.levels
    }

    /// `(input width, output width)` of every layer.
    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|l| {
                let fan_in = match l {
                    0 => self.input_width(),
                    _ if Some(l) == self.skip_layer => self.hidden + self.input_width(),
                    _ => self.hidden,
                };
                let out = if l + 1 == self.num_layers { self.num_classes } else { self.hidden };
                (fan_in, out)
            })
            .collect()
    }
}

/// Sinusoidal encoding of normalized coordinates.
///
/// For each axis value `c` the output holds `sin(2^l π c), cos(2^l π c)` for
/// `l = 0..levels`, axis-major, giving `6 · levels` values per point.
pub fn positional_encode<T: Scalar>(coords: &[[f64; 3]], levels: usize) -> Tensor<T> {
    let width = 6 * levels;
    let mut out = Vec::with_capacity(coords.len() * width);
    for p in coords {
        for &c in p {
            let c = c.clamp(-1.0, 1.0);
            for l in 0..levels {
                let arg = f64::from(1u32 << l) * PI * c;
                out.push(T::lit(arg.sin()));
                out.push(T::lit(arg.cos()));
            }
        }
    }
    Tensor::from_vec(&[coords.len(), width], out).expect("encoding width")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub direction: Tensor<T>,
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub config: DecoderConfig,
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> DecoderParams<T> {
    /// Directions drawn with `std = sqrt(2 / fan_in)`, gains set to the row
    /// norms so the initial effective weight equals the direction.
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_widths()
            .into_iter()
            .map(|(fan_in, out)| {
                let direction = Tensor::<T>::randn(&[out, fan_in], (2.0 / fan_in as f64).sqrt(), &mut rng);
                let norms: Vec<T> =
                    direction.data().chunks(fan_in).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
                DenseLayer {
                    direction,
                    gain: Tensor::from_vec(&[out], norms).expect("gain shape"),
                    bias: Tensor::zeros(&[out]),
                }
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    pub fn zeros(config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_widths()
            .into_iter()
            .map(|(fan_in, out)| DenseLayer {
                direction: Tensor::zeros(&[out, fan_in]),
                gain: Tensor::zeros(&[out]),
                bias: Tensor::zeros(&[out]),
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 3);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("fc{i}.direction"), &l.direction));
            out.push((format!("fc{i}.gain"), &l.gain));
            out.push((format!("fc{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.direction, &mut l.gain, &mut l.bias]).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DecoderVars {
        let mut leaf = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let layers = self.layers.iter().map(|l| [leaf(&l.direction), leaf(&l.gain), leaf(&l.bias)]).collect();
        DecoderVars { layers, config: self.config.clone() }
    }

    /// Evaluation-mode logits for an `n × input_width` matrix.
    pub fn forward(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let y = vars.forward(&mut g, x, false, 0)?;
        Ok(g.value(y).clone())
    }
}

/// Decoder parameters registered in a graph.
pub struct DecoderVars {
    layers: Vec<[Var; 3]>,
    config: DecoderConfig,
}

impl DecoderVars {
    /// Reuses existing graph leaves, ordered as [`DecoderParams::named_tensors`].
    pub fn from_vars(config: &DecoderConfig, vars: &[Var]) -> Result<Self> {
        let n = config.num_layers * 3;
        if vars.len() != n {
            return Err(Error::Shape(format!("decoder needs {n} leaves, got {}", vars.len())));
        }
        let layers = vars.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { layers, config: config.clone() })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    /// Logits for each input row. Dropout is active only when `training`;
    /// each layer draws its mask from a stream derived from `seed`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, inputs: Var, training: bool, seed: u64) -> Result<Var> {
        let (_, width) = g.value(inputs).dims2()?;
        if width != self.config.input_width() {
            return Err(Error::Shape(format!(
                "decoder expects rows of width {}, got {width}",
                self.config.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = inputs;
        for (l, &[v, gain, b]) in self.layers.iter().enumerate() {
            let x = if Some(l) == self.config.skip_layer { g.concat_cols(&[h, inputs])? } else { h };
            h = g.dense_weightnorm(x, v, gain, b)?;
            if l < last {
                h = g.relu(h)?;
                h = g.dropout(h, self.config.dropout, training, layer_seed(seed, l))?;
            }
        }
        Ok(h)
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    crate::seed::derive(seed, &[0xD0, layer as u64])
}

/// Class probabilities from logits, row by row: softmax for ≥2 classes,
/// sigmoid for one.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f32>> {
    let (n, c) = logits.dims2()?;
    let mut row = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut out = Vec::with_capacity(n * c);
    for chunk in logits.data().chunks(c.max(1)) {
        for (r, &z) in row.iter_mut().zip(chunk) {
            *r = z.to_f64_lossy();
        }
        row_probabilities(&row, &mut p);
        out.extend(p.iter().map(|&v| v as f32));
    }
    Ok(out)
}
