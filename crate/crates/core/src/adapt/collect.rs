use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealVector;
use crate::sim::{CsiShape, FeatureExtractor, LabeledFrame};
use crate::sync::{
    build_labeled_dataset, pair_streams, ClockModel, DatasetConfig, LabeledDataset, RingBuffer,
    StreamClock, SyncConfig,
};
use crate::teacher::{LabelSource, TeacherLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionConfig {
    pub csi_rate_hz: f64,
    pub shape: CsiShape,
    pub csi_clock: ClockModel,
    pub teacher_clock: ClockModel,
    pub sync: SyncConfig,
    pub dataset: DatasetConfig,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            csi_rate_hz: 100.0,
            shape: CsiShape::default(),
            csi_clock: ClockModel {
                jitter_std_ns: 50.0,
                seed: 11,
                ..Default::default()
            },
            teacher_clock: ClockModel {
                offset_ns: 80,
                jitter_std_ns: 50.0,
                drift_ppm: 0.5,
                seed: 12,
                ..Default::default()
            },
            sync: SyncConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.csi_rate_hz > 0.0 && self.csi_rate_hz.is_finite()) {
            return Err(Error::invalid(format!(
                "CSI rate {} Hz must be positive",
                self.csi_rate_hz
            )));
        }
        self.shape.validate()?;
        self.csi_clock.validate()?;
        self.teacher_clock.validate()?;
        self.sync.validate()?;
        self.dataset.validate()
    }
}

/// Wall time spent per stage during one collection.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub csi_processing: Duration,
    pub teacher_inference: Duration,
    pub pairing: Duration,
    pub csi_frames: usize,
    pub teacher_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Collection {
    pub dataset: LabeledDataset,
    pub labels: usize,
    pub pairs: usize,
    pub csi_overflows: u64,
    pub label_overflows: u64,
    pub timings: StageTimings,
}

/// Node-side collection over `frames`, the CSI observed while the teacher is
/// active. The ground-truth label of each frame stands in for what the
/// camera sees; only the teacher reads it.
pub fn collect_labeled<S: LabelSource + ?Sized>(
    frames: &[LabeledFrame],
    teacher: &mut S,
    config: &CollectionConfig,
) -> Result<Collection> {
    config.validate()?;
    let first = frames.first().ok_or(Error::Empty("collection frames"))?;
    let rate = teacher.rate_hz();
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::invalid(format!(
            "teacher rate {rate} Hz must be positive"
        )));
    }
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let mut fx = FeatureExtractor::new(first.frame.shape)?;
    let mut csi_clock = StreamClock::new(config.csi_clock)?;
    let mut csi_ring: RingBuffer<(u64, RealVector)> = RingBuffer::new(config.sync.csi_capacity)?;
    for f in frames {
        let ts = csi_clock.stamp(f.frame.timestamp_ns);
        csi_ring.push((ts, fx.extract(&f.frame)?));
    }
    timings.csi_processing = t0.elapsed();
    timings.csi_frames = frames.len();

    let t0 = Instant::now();
    let duration_ns = frames.len() as f64 * 1e9 / config.csi_rate_hz;
    let mut teacher_clock = StreamClock::new(config.teacher_clock)?;
    let mut label_ring: RingBuffer<TeacherLabel> = RingBuffer::new(config.sync.label_capacity)?;
    let mut k = 0u64;
    loop {
        let elapsed = k as f64 * 1e9 / rate;
        if elapsed >= duration_ns {
            break;
        }
        let idx = ((elapsed * config.csi_rate_hz / 1e9) as usize).min(frames.len() - 1);
        let ts = teacher_clock.stamp(elapsed.round() as u64);
        label_ring.push(teacher.label(frames[idx].label, ts)?);
        k += 1;
    }
    timings.teacher_inference = t0.elapsed();
    timings.teacher_frames = k as usize;

    let t0 = Instant::now();
    let (csi_ts, features): (Vec<u64>, Vec<RealVector>) = csi_ring.drain().into_iter().unzip();
    let labels = label_ring.drain();
    let pairing = pair_streams(&csi_ts, &labels, &config.sync)?;
    let dataset = build_labeled_dataset(&features, &csi_ts, &labels, &pairing, &config.dataset)?;
    timings.pairing = t0.elapsed();

    Ok(Collection {
        labels: labels.len(),
        pairs: pairing.pairs.len(),
        csi_overflows: csi_ring.overflows(),
        label_overflows: label_ring.overflows(),
        dataset,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{balanced_schedule, generate_stream, ChannelProfile};
    use crate::teacher::{OracleTeacher, OracleTeacherConfig};

    fn frames(seconds_per_class: f64) -> Vec<LabeledFrame> {
        let sched = balanced_schedule(seconds_per_class, 1, 4);
        generate_stream(
            &sched,
            &ChannelProfile::reference(52),
            CsiShape::default(),
            100.0,
            4,
        )
        .unwrap()
    }

    #[test]
    fn perfect_teacher_labels_match_truth() {
        let f = frames(4.0);
        let mut t = OracleTeacher::new(OracleTeacherConfig::uniform(1.0, 30.0, 1)).unwrap();
        let c = collect_labeled(&f, &mut t, &CollectionConfig::default()).unwrap();
        assert_eq!(c.labels, 960);
        assert_eq!(c.timings.csi_frames, 3200);
        assert!(c.dataset.samples.len() > 40);
        for s in &c.dataset.samples {
            assert_eq!(s.label, f[s.end_index].label);
        }
        assert_eq!(c.csi_overflows, 0);
    }

    #[test]
    fn offset_beyond_epsilon_yields_nothing() {
        let f = frames(2.0);
        let mut cfg = CollectionConfig::default();
        // a clock that never got the PPS edge: an hour off
        cfg.teacher_clock.offset_ns = 3_600_000_000_000;
        let mut t = OracleTeacher::new(OracleTeacherConfig::uniform(1.0, 30.0, 1)).unwrap();
        let c = collect_labeled(&f, &mut t, &cfg).unwrap();
        assert!(c.dataset.samples.is_empty());
    }

    #[test]
    fn small_ring_overflows_and_keeps_latest() {
        let f = frames(2.0);
        let mut cfg = CollectionConfig::default();
        cfg.sync.csi_capacity = 1024;
        let mut t = OracleTeacher::new(OracleTeacherConfig::uniform(1.0, 30.0, 1)).unwrap();
        let c = collect_labeled(&f, &mut t, &cfg).unwrap();
        assert_eq!(c.csi_overflows, 1600 - 1024);
        for s in &c.dataset.samples {
            assert_eq!(s.label, f[s.end_index + 576].label);
        }
    }
}
