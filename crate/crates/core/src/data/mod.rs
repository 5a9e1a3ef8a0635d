//! Volumes, their file format, preprocessing, synthetic data and metrics.

pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod synth;
pub mod volume;

pub use io::{read_any_volume, read_volume, write_volume, AnyVolume};
pub use metrics::dice_metric;
pub use preprocess::{normalize_dataset, percentile, resample_z, DatasetStats};
pub use synth::{sphere_phantom, synth_generate, Case, SynthConfig};
pub use volume::{ImageVolume, LabelVolume, Volume, VolumeKind, Voxel};
