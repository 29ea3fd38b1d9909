//! Timestamping, bounded buffers and nearest-within-epsilon pairing of CSI
//! frames with teacher labels.

mod clock;
mod dataset;
mod pairing;
mod ring;

pub use clock::{ClockModel, StreamClock};
pub use dataset::{
    build_labeled_dataset, DatasetConfig, DatasetStats, LabeledDataset, LabeledSample,
};
pub use pairing::{pair_streams, pair_streams_brute_force, Pairing, SyncConfig, SyncedPair};
pub use ring::{spsc_ring, RingBuffer, RingConsumer, RingProducer};
