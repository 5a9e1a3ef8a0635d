//! Optional TOML config file; command-line flags override its values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use imunet::{InferenceConfig, ModelConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

/// Architecture knobs exposed on the command line. The class count comes
/// from the training labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub block_channels: [usize; 4],
    pub hidden: usize,
    pub num_layers: usize,
    pub levels: usize,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { block_channels: [8, 16, 32, 64], hidden: 128, num_layers: 8, levels: 10, dropout: 0.2 }
    }
}

impl ModelSpec {
    pub fn build(&self, num_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::with(self.block_channels, self.hidden, num_classes);
        cfg.decoder.num_layers = self.num_layers;
        cfg.decoder.levels = self.levels;
        cfg.decoder.dropout = self.dropout;
        if self.num_layers <= 4 {
            cfg.decoder.skip_layer = None;
        }
        cfg
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Parses `a,b,c` into a fixed-size array.
pub fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    parse_list::<usize>(s)?.try_into().map_err(|v: Vec<usize>| format!("expected 3 values, got {}", v.len()))
}

pub fn parse_quad(s: &str) -> Result<[usize; 4], String> {
    parse_list::<usize>(s)?.try_into().map_err(|v: Vec<usize>| format!("expected 4 values, got {}", v.len()))
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("'{p}': {e}"))).collect()
}

pub fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        bail!("{name} must lie in [0, 1], got {v}");
    }
    Ok(())
}
