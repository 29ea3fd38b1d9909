use serde::{Deserialize, Serialize};

use super::Pairing;
use crate::error::{Error, Result};
use crate::model::Example;
use crate::numerics::{RealMatrix, RealVector};
use crate::sim::ActivityClass;
use crate::teacher::TeacherLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Frames per window.
    pub window: usize,
    pub stride: usize,
    /// A window is dropped when two or more labels each cover at least
    /// this share of its paired frames.
    pub conflict_share: f64,
    /// Also drop windows whose final frame sits between two teacher frames
    /// that disagree.
    pub require_corroboration: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 128,
            stride: 32,
            conflict_share: 0.25,
            require_corroboration: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::invalid("window and stride must be positive"));
        }
        if !(self.conflict_share > 0.0 && self.conflict_share <= 0.5) {
            return Err(Error::invalid(format!(
                "conflict share {} outside (0, 0.5]",
                self.conflict_share
            )));
        }
        Ok(())
    }
}

/// A window of features with the teacher label of its final frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub window: RealMatrix,
    pub label: ActivityClass,
    /// Pairing distance of the final frame.
    pub delta_ns: u64,
    pub end_timestamp_ns: u64,
    /// Index of the final frame in the CSI stream.
    pub end_index: usize,
}

impl Example for LabeledSample {
    fn window(&self) -> &RealMatrix {
        &self.window
    }

    fn label_index(&self) -> usize {
        self.label.index()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub windows: usize,
    /// Final frame had no label within epsilon.
    pub unmatched: usize,
    pub conflicting: usize,
    pub uncorroborated: usize,
    pub emitted: usize,
}

impl DatasetStats {
    pub fn matched(&self) -> usize {
        self.windows - self.unmatched
    }

    pub fn dropped(&self) -> usize {
        self.conflicting + self.uncorroborated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
    pub stats: DatasetStats,
}

/// Cuts the paired stream into fixed-length windows labelled by their final
/// frame. `features[i]` belongs to `csi_ts[i]`.
pub fn build_labeled_dataset(
    features: &[RealVector],
    csi_ts: &[u64],
    labels: &[TeacherLabel],
    pairing: &Pairing,
    config: &DatasetConfig,
) -> Result<LabeledDataset> {
    config.validate()?;
    if features.len() != csi_ts.len() {
        return Err(Error::shape(format!(
            "{} feature vectors for {} timestamps",
            features.len(),
            csi_ts.len()
        )));
    }
    if let Some(p) = pairing
        .pairs
        .iter()
        .find(|p| p.csi_index >= csi_ts.len() || p.label_index >= labels.len())
    {
        return Err(Error::invalid(format!(
            "pair {p:?} indexes outside the streams"
        )));
    }
    let dim = features.first().map_or(0, RealVector::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let lookup = pairing.lookup(csi_ts.len());
    let label_ts: Vec<u64> = labels.iter().map(|l| l.timestamp_ns).collect();

    let mut stats = DatasetStats::default();
    let mut samples = Vec::new();
    let mut start = 0;
    while start + config.window <= features.len() {
        let end = start + config.window - 1;
        start += config.stride;
        stats.windows += 1;
        let Some(k) = lookup[end] else {
            stats.unmatched += 1;
            continue;
        };
        let pair = pairing.pairs[k];
        let label = labels[pair.label_index].class;

        let mut counts = [0usize; ActivityClass::COUNT];
        let mut paired = 0;
        for k in lookup[end + 1 - config.window..=end].iter().flatten() {
            counts[labels[pairing.pairs[*k].label_index].class.index()] += 1;
            paired += 1;
        }
        let heavy = counts
            .iter()
            .filter(|&&c| c as f64 >= config.conflict_share * paired as f64 && c > 0)
            .count();
        if heavy >= 2 {
            stats.conflicting += 1;
            continue;
        }

        if config.require_corroboration {
            let t = csi_ts[end];
            let after = label_ts.partition_point(|&s| s < t);
            let before = label_ts.partition_point(|&s| s <= t);
            let neighbours = [
                before.checked_sub(1),
                (after < labels.len()).then_some(after),
            ];
            if neighbours
                .iter()
                .flatten()
                .any(|&i| labels[i].class != label)
            {
                stats.uncorroborated += 1;
                continue;
            }
        }

        let rows = features[end + 1 - config.window..=end]
            .iter()
            .map(RealVector::as_slice);
        samples.push(LabeledSample {
            window: RealMatrix::from_rows(rows)?,
            label,
            delta_ns: pair.delta_ns,
            end_timestamp_ns: csi_ts[end],
            end_index: end,
        });
    }
    stats.emitted = samples.len();
    Ok(LabeledDataset { samples, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::{pair_streams, SyncConfig};

    const CSI_NS: u64 = 10_000_000;
    const CAM_NS: u64 = 33_333_333;

    fn truth_at(schedule: &[(ActivityClass, u64)], t: u64) -> ActivityClass {
        let mut acc = 0;
        for &(c, d) in schedule {
            acc += d;
            if t < acc {
                return c;
            }
        }
        schedule.last().unwrap().0
    }

    fn streams(
        schedule: &[(ActivityClass, u64)],
    ) -> (Vec<RealVector>, Vec<u64>, Vec<TeacherLabel>) {
        let total: u64 = schedule.iter().map(|s| s.1).sum();
        let csi_ts: Vec<u64> = (0..total / CSI_NS).map(|i| i * CSI_NS).collect();
        let feats = csi_ts
            .iter()
            .map(|&t| RealVector::new(vec![truth_at(schedule, t).index() as f64]).unwrap())
            .collect();
        let labels = (0..total / CAM_NS)
            .map(|i| TeacherLabel {
                class: truth_at(schedule, i * CAM_NS),
                confidence: 1.0,
                timestamp_ns: i * CAM_NS,
            })
            .collect();
        (feats, csi_ts, labels)
    }

    fn build(schedule: &[(ActivityClass, u64)], cfg: &DatasetConfig) -> (LabeledDataset, Vec<u64>) {
        let (f, ts, l) = streams(schedule);
        let p = pair_streams(&ts, &l, &SyncConfig::default()).unwrap();
        (build_labeled_dataset(&f, &ts, &l, &p, cfg).unwrap(), ts)
    }

    #[test]
    fn homogeneous_stream_drops_nothing() {
        let (d, _) = build(
            &[(ActivityClass::Run, 20_000_000_000)],
            &DatasetConfig::default(),
        );
        assert_eq!(d.stats.dropped(), 0);
        assert_eq!(d.stats.unmatched, 0);
        assert_eq!(d.samples.len(), d.stats.windows);
        assert!(d.samples.iter().all(|s| s.label == ActivityClass::Run));
    }

    #[test]
    fn boundary_mid_window_is_dropped() {
        let cfg = DatasetConfig {
            window: 100,
            stride: 100,
            ..Default::default()
        };
        // Second window spans 1.0 s .. 2.0 s; the boundary is at 1.5 s.
        let (d, _) = build(
            &[
                (ActivityClass::Walk, 1_500_000_000),
                (ActivityClass::Fall, 1_600_000_000),
            ],
            &cfg,
        );
        assert_eq!(d.stats.windows, 3);
        assert_eq!(d.stats.conflicting, 1);
        assert_eq!(d.samples.len(), 2);
        assert_eq!(d.samples[0].label, ActivityClass::Walk);
        assert_eq!(d.samples[1].label, ActivityClass::Fall);
    }

    #[test]
    fn emitted_is_matched_minus_dropped() {
        let sched: Vec<(ActivityClass, u64)> = ActivityClass::ALL
            .iter()
            .map(|&c| (c, 2_370_000_000 + 10_000_000 * c.index() as u64))
            .collect();
        let (d, _) = build(&sched, &DatasetConfig::default());
        assert_eq!(d.stats.emitted, d.stats.matched() - d.stats.dropped());
        assert_eq!(d.samples.len(), d.stats.emitted);
    }

    #[test]
    fn perfect_teacher_labels_are_sound() {
        let sched: Vec<(ActivityClass, u64)> = (0..24)
            .map(|i| {
                (
                    ActivityClass::ALL[(i * 5) % 8],
                    700_000_000 + 37_000_000 * i as u64,
                )
            })
            .collect();
        let cfg = DatasetConfig {
            stride: 1,
            ..Default::default()
        };
        let (d, ts) = build(&sched, &cfg);
        assert!(d.samples.len() > 1000);
        for s in &d.samples {
            assert_eq!(s.label, truth_at(&sched, ts[s.end_index]));
        }
    }

    #[test]
    fn unmatched_windows_are_counted_not_labelled() {
        let (f, ts, mut l) = streams(&[(ActivityClass::Walk, 5_000_000_000)]);
        l.retain(|x| x.timestamp_ns < 2_000_000_000);
        let p = pair_streams(&ts, &l, &SyncConfig::default()).unwrap();
        let d = build_labeled_dataset(&f, &ts, &l, &p, &DatasetConfig::default()).unwrap();
        assert!(d.stats.unmatched > 0);
        assert!(d
            .samples
            .iter()
            .all(|s| s.end_timestamp_ns < 2_000_000_000 + 16_666_667));
    }
}
