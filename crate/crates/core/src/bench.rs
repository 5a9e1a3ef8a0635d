//! Dense vs sparse inference comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{dice_metric, ImageVolume};
use crate::encoder::check_patch_dims;
use crate::error::Result;
use crate::inference::{segment, InferenceConfig};
use crate::model::ImplicitUNet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub volume: String,
    pub dims: [usize; 3],
    pub voxels: usize,
    pub spacing: usize,
    /// Decoder evaluations of the spacing-1 run, summed over windows.
    pub dense_evaluations: usize,
    pub sparse_broad_evaluations: usize,
    pub sparse_refinement_evaluations: usize,
    pub sparse_evaluations: usize,
    pub evaluation_ratio: f64,
    pub refinement_skipped: usize,
    pub dense_seconds: f64,
    pub sparse_seconds: f64,
    /// Dice between sparse and dense labels for classes `1..`.
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn mean_ratio(&self) -> f64 {
        self.records.iter().map(|r| r.evaluation_ratio).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn min_dice(&self) -> f64 {
        self.records.iter().flat_map(|r| r.dice.iter().copied()).fold(1.0, f64::min)
    }
}

/// Runs every volume at spacing 1 and at `cfg.spacing`, recording decoder
/// evaluation counts, wall times and label agreement.
pub fn bench_compare<T: Scalar>(
    model: &ImplicitUNet<T>,
    volumes: &[(String, ImageVolume)],
    patch_size: [usize; 3],
    cfg: &InferenceConfig,
) -> Result<BenchReport> {
    check_patch_dims(patch_size)?;
    cfg.validate()?;
    let dense_cfg = InferenceConfig { spacing: 1, ..cfg.clone() };
    let classes = model.num_classes().max(2);
    let mut records = Vec::with_capacity(volumes.len());
    for (name, vol) in volumes {
        let t0 = Instant::now();
        let (dense, _, dense_stats) = segment(model, vol, patch_size, &dense_cfg)?;
        let dense_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let (sparse, _, sparse_stats) = segment(model, vol, patch_size, cfg)?;
        let sparse_seconds = t1.elapsed().as_secs_f64();
        let dice = (1..classes).map(|c| dice_metric(&sparse, &dense, c as u8)).collect::<Result<Vec<_>>>()?;
        let dense_evaluations = dense_stats.evaluations();
        records.push(BenchRecord {
            volume: name.clone(),
            dims: vol.dims(),
            voxels: vol.len(),
            spacing: cfg.spacing,
            dense_evaluations,
            sparse_broad_evaluations: sparse_stats.broad_points,
            sparse_refinement_evaluations: sparse_stats.refinement_points,
            sparse_evaluations: sparse_stats.evaluations(),
            evaluation_ratio: sparse_stats.evaluations() as f64 / dense_evaluations.max(1) as f64,
            refinement_skipped: sparse_stats.refinement_skipped,
            dense_seconds,
            sparse_seconds,
            dice,
        });
    }
    Ok(BenchReport { records })
}
