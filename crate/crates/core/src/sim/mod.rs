//! Deterministic synthetic CSI: activity signatures, channel profiles,
//! domain shifts, feature extraction and dataset splitting.

mod activity;
mod features;
mod generator;
mod profile;
mod split;
mod stream_io;

pub use activity::ActivityClass;
pub use features::{frame_to_features, FeatureExtractor};
pub use generator::{
    balanced_schedule, generate_stream, CsiFrame, CsiShape, LabeledFrame, Schedule,
    SUBCARRIER_SPACING_HZ,
};
pub use profile::{apply_domain_shift, ChannelProfile, DomainShiftSpec, ShiftPreset, Tap};
pub use split::{split_dataset, DatasetSplit};
pub use stream_io::{read_stream, write_stream, StreamDump, STREAM_MAGIC, STREAM_VERSION};
