//! Series ingestion, security margins, lag windows, chronological splits and
//! the synthetic scenario generator.

mod manifest;
mod series;
mod synth;
mod windows;

pub use manifest::DatasetManifest;
pub use series::{compute_margins, lag_steps_from_minutes, FlowgateSeries, TIMESTAMP_FORMAT};
pub use synth::{synth_generate, GroundTruth, Mvn, RegimeSpec, SynthConfig};
pub use windows::{
    build_windows, feature_refs, split_and_normalize, targets, Dataset, DatasetSplit, SampleWindow,
    MIN_WINDOWS, TRAIN_FRACTION, VAL_FRACTION,
};
