use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teacher::TeacherLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Pairing tolerance between a CSI frame and a teacher label.
    pub epsilon_ns: u64,
    /// Bound on PPS clock disagreement between the two capture paths. This
    /// is a hardware figure, distinct from the pairing tolerance.
    pub clock_alignment_ns: u64,
    pub csi_capacity: usize,
    pub label_capacity: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            // Half a 30 Hz camera interval.
            epsilon_ns: 16_666_667,
            clock_alignment_ns: 100,
            csi_capacity: 8192,
            label_capacity: 4096,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_ns == 0 {
            return Err(Error::invalid("epsilon must be > 0"));
        }
        for (name, c) in [("csi", self.csi_capacity), ("label", self.label_capacity)] {
            if c == 0 || !c.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "{name} buffer capacity {c} must be a power of two"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncedPair {
    pub csi_index: usize,
    pub label_index: usize,
    pub delta_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pairing {
    /// One entry per matched CSI frame, in CSI order.
    pub pairs: Vec<SyncedPair>,
    pub unmatched_csi: usize,
    /// Labels no frame chose.
    pub unused_labels: usize,
}

impl Pairing {
    /// Pair index per CSI frame.
    pub fn lookup(&self, csi_len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; csi_len];
        for (k, p) in self.pairs.iter().enumerate() {
            out[p.csi_index] = Some(k);
        }
        out
    }
}

fn check_sorted(ts: impl Iterator<Item = u64>) -> Result<()> {
    let mut prev = None;
    for (i, t) in ts.enumerate() {
        if prev.is_some_and(|p| t < p) {
            return Err(Error::Unsorted(i));
        }
        prev = Some(t);
    }
    Ok(())
}

fn finish(pairs: Vec<SyncedPair>, csi_len: usize, label_len: usize) -> Pairing {
    let mut used = vec![false; label_len];
    pairs.iter().for_each(|p| used[p.label_index] = true);
    Pairing {
        unmatched_csi: csi_len - pairs.len(),
        unused_labels: used.iter().filter(|u| !**u).count(),
        pairs,
    }
}

/// Matches every CSI timestamp to the nearest label within epsilon. Ties go
/// to the earlier label. Both inputs must be sorted.
pub fn pair_streams(
    csi_ts: &[u64],
    labels: &[TeacherLabel],
    config: &SyncConfig,
) -> Result<Pairing> {
    config.validate()?;
    check_sorted(csi_ts.iter().copied())?;
    check_sorted(labels.iter().map(|l| l.timestamp_ns))?;
    let eps = config.epsilon_ns;
    let mut pairs = Vec::with_capacity(csi_ts.len());
    let mut j = 0;
    for (i, &t) in csi_ts.iter().enumerate() {
        while j < labels.len() && labels[j].timestamp_ns < t {
            j += 1;
        }
        // Earliest label sharing the timestamp of the one just before `t`.
        let before = (j > 0).then(|| {
            let ts = labels[j - 1].timestamp_ns;
            labels[..j].partition_point(|l| l.timestamp_ns < ts)
        });
        let after = (j < labels.len()).then_some(j);
        let best = match (before, after) {
            (Some(b), Some(a)) => {
                let db = t - labels[b].timestamp_ns;
                let da = labels[a].timestamp_ns - t;
                if db <= da {
                    Some((b, db))
                } else {
                    Some((a, da))
                }
            }
            (Some(b), None) => Some((b, t - labels[b].timestamp_ns)),
            (None, Some(a)) => Some((a, labels[a].timestamp_ns - t)),
            (None, None) => None,
        };
        if let Some((k, d)) = best.filter(|&(_, d)| d <= eps) {
            pairs.push(SyncedPair {
                csi_index: i,
                label_index: k,
                delta_ns: d,
            });
        }
    }
    debug_assert!(pairs.iter().all(|p| p.delta_ns <= eps));
    Ok(finish(pairs, csi_ts.len(), labels.len()))
}

/// O(N*M) reference for [`pair_streams`].
pub fn pair_streams_brute_force(
    csi_ts: &[u64],
    labels: &[TeacherLabel],
    config: &SyncConfig,
) -> Result<Pairing> {
    config.validate()?;
    check_sorted(csi_ts.iter().copied())?;
    check_sorted(labels.iter().map(|l| l.timestamp_ns))?;
    let mut pairs = Vec::new();
    for (i, &t) in csi_ts.iter().enumerate() {
        let mut best: Option<(u64, usize)> = None;
        for (k, l) in labels.iter().enumerate() {
            let d = t.abs_diff(l.timestamp_ns);
            if d <= config.epsilon_ns && best.map_or(true, |b| (d, k) < b) {
                best = Some((d, k));
            }
        }
        if let Some((d, k)) = best {
            pairs.push(SyncedPair {
                csi_index: i,
                label_index: k,
                delta_ns: d,
            });
        }
    }
    Ok(finish(pairs, csi_ts.len(), labels.len()))
}
