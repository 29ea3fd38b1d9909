use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-stream clock disciplined by a shared PPS epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub pps_epoch_ns: u64,
    pub offset_ns: i64,
    pub jitter_std_ns: f64,
    pub drift_ppm: f64,
    pub seed: u64,
}

impl Default for ClockModel {
    fn default() -> Self {
        Self {
            pps_epoch_ns: 0,
            offset_ns: 0,
            jitter_std_ns: 0.0,
            drift_ppm: 0.0,
            seed: 0,
        }
    }
}

impl ClockModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_std_ns >= 0.0 && self.jitter_std_ns.is_finite()) {
            return Err(Error::invalid(format!(
                "jitter {} ns must be >= 0",
                self.jitter_std_ns
            )));
        }
        if !self.drift_ppm.is_finite() || self.drift_ppm.abs() >= 1e6 {
            return Err(Error::invalid(format!(
                "drift {} ppm out of range",
                self.drift_ppm
            )));
        }
        Ok(())
    }
}

/// Stateful stamper for one stream.
#[derive(Debug, Clone)]
pub struct StreamClock {
    model: ClockModel,
    rng: ChaCha8Rng,
    last: Option<u64>,
}

impl StreamClock {
    pub fn new(model: ClockModel) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
            last: None,
        })
    }

    /// Timestamp for an event `elapsed_ns` after the PPS epoch:
    /// epoch + offset + drift-scaled elapsed + jitter, forced strictly
    /// increasing and non-negative.
    pub fn stamp(&mut self, elapsed_ns: u64) -> u64 {
        let m = &self.model;
        let jitter = if m.jitter_std_ns > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * m.jitter_std_ns
        } else {
            0.0
        };
        let skew = elapsed_ns as f64 * m.drift_ppm * 1e-6 + jitter;
        let raw = m.pps_epoch_ns as i128
            + m.offset_ns as i128
            + elapsed_ns as i128
            + skew.round() as i128;
        let t = raw.clamp(0, u64::MAX as i128) as u64;
        let t = match self.last {
            Some(prev) => t.max(prev.saturating_add(1)),
            None => t,
        };
        self.last = Some(t);
        t
    }

    pub fn stamp_all(&mut self, elapsed_ns: &[u64]) -> Vec<u64> {
        elapsed_ns.iter().map(|&e| self.stamp(e)).collect()
    }
}
