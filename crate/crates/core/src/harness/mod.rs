//! Datasets, synthetic data, baselines, metrics and checkpoints.

pub mod baseline;
pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod synth;

pub use baseline::{nearest_rows, nn_baseline};
pub use checkpoint::{data_checksum, Checkpoint};
pub use dataset::TimeSeriesDataset;
pub use metrics::{evaluate, MetricReport, MetricSpec};
pub use synth::{synth_generate, SynthConfig, SynthData};
