use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelSource, TeacherLabel};
use crate::error::{Error, Result};
use crate::sim::ActivityClass;

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTeacherConfig {
    /// Probability of reporting the true class.
    pub precision: f64,
    /// `C x C`; row `i` is the label distribution when the truth is `i`.
    /// The diagonal must equal `precision`.
    pub confusion: Vec<Vec<f64>>,
    pub rate_hz: f64,
    pub seed: u64,
}

impl OracleTeacherConfig {
    pub const DEFAULT_PRECISION: f64 = 0.703;
    pub const DEFAULT_RATE_HZ: f64 = 30.0;

    /// Errors spread evenly over the other classes.
    pub fn uniform(precision: f64, rate_hz: f64, seed: u64) -> Self {
        let c = ActivityClass::COUNT;
        let off = (1.0 - precision) / (c - 1) as f64;
        let confusion = (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| if i == j { precision } else { off })
                    .collect()
            })
            .collect();
        Self {
            precision,
            confusion,
            rate_hz,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.precision;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "teacher precision {p} outside [0, 1]"
            )));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::invalid(format!(
                "teacher rate {} must be > 0",
                self.rate_hz
            )));
        }
        let c = ActivityClass::COUNT;
        if self.confusion.len() != c || self.confusion.iter().any(|r| r.len() != c) {
            return Err(Error::shape(format!("confusion matrix must be {c}x{c}")));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid(format!(
                    "confusion row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > TOL {
                return Err(Error::invalid(format!("confusion row {i} sums to {sum}")));
            }
            if (row[i] - p).abs() > TOL {
                return Err(Error::invalid(format!(
                    "confusion diagonal {} at row {i} disagrees with precision {p}",
                    row[i]
                )));
            }
            if p < 1.0 && 1.0 - row[i] <= TOL {
                return Err(Error::invalid(format!(
                    "confusion row {i} has no off-diagonal mass"
                )));
            }
        }
        Ok(())
    }
}

impl Default for OracleTeacherConfig {
    fn default() -> Self {
        Self::uniform(Self::DEFAULT_PRECISION, Self::DEFAULT_RATE_HZ, 0)
    }
}

/// One oracle draw. Both random numbers are consumed on every call, so for
/// a fixed seed the set of wrong answers shrinks as `precision` grows.
pub fn oracle_label<R: Rng + ?Sized>(
    truth: ActivityClass,
    config: &OracleTeacherConfig,
    timestamp_ns: u64,
    rng: &mut R,
) -> TeacherLabel {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let row = &config.confusion[truth.index()];
    let class = if u < config.precision {
        truth
    } else {
        let off_mass: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != truth.index())
            .map(|(_, w)| w)
            .sum();
        let target = v * off_mass;
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &w) in row.iter().enumerate() {
            if j == truth.index() || w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(j);
            if target < acc {
                break;
            }
        }
        ActivityClass::ALL[pick.unwrap_or(truth.index())]
    };
    TeacherLabel {
        class,
        confidence: row[class.index()].max(f64::MIN_POSITIVE),
        timestamp_ns,
    }
}

/// Seeded oracle; counts how often it was asked.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    config: OracleTeacherConfig,
    rng: ChaCha8Rng,
    calls: u64,
}

impl OracleTeacher {
    pub fn new(config: OracleTeacherConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            calls: 0,
        })
    }

    pub fn config(&self) -> &OracleTeacherConfig {
        &self.config
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl LabelSource for OracleTeacher {
    fn label(&mut self, truth: ActivityClass, timestamp_ns: u64) -> Result<TeacherLabel> {
        self.calls += 1;
        Ok(oracle_label(
            truth,
            &self.config,
            timestamp_ns,
            &mut self.rng,
        ))
    }

    fn rate_hz(&self) -> f64 {
        self.config.rate_hz
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p: f64, n: usize, seed: u64) -> Vec<(ActivityClass, ActivityClass)> {
        let mut t = OracleTeacher::new(OracleTeacherConfig::uniform(p, 30.0, seed)).unwrap();
        (0..n)
            .map(|i| {
                let truth = ActivityClass::ALL[i % 8];
                (truth, t.label(truth, i as u64).unwrap().class)
            })
            .collect()
    }

    #[test]
    fn perfect_precision_is_always_right() {
        assert!(run(1.0, 5000, 1).iter().all(|(a, b)| a == b));
    }

    #[test]
    fn zero_precision_is_never_right() {
        assert!(run(0.0, 5000, 2).iter().all(|(a, b)| a != b));
    }

    #[test]
    fn empirical_precision_matches_config() {
        let n = 100_000;
        let hits = run(0.703, n, 3).iter().filter(|(a, b)| a == b).count();
        let rate = hits as f64 / n as f64;
        assert!((0.700..=0.706).contains(&rate), "rate {rate}");
    }

    #[test]
    fn errors_are_nested_across_precision() {
        let lo = run(0.5, 2000, 4);
        let hi = run(0.9, 2000, 4);
        for (l, h) in lo.iter().zip(&hi) {
            if h.0 != h.1 {
                assert_ne!(l.0, l.1);
                assert_eq!(l.1, h.1);
            }
        }
    }

    #[test]
    fn confusion_row_is_respected() {
        let mut cfg = OracleTeacherConfig::uniform(0.0, 30.0, 5);
        for (i, row) in cfg.confusion.iter_mut().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[(i + 1) % 8] = 1.0;
        }
        let mut t = OracleTeacher::new(cfg).unwrap();
        for c in ActivityClass::ALL {
            let got = t.label(c, 0).unwrap().class;
            assert_eq!(got.index(), (c.index() + 1) % 8);
        }
    }

    #[test]
    fn validation() {
        let mut cfg = OracleTeacherConfig::uniform(0.7, 30.0, 0);
        cfg.confusion[2][2] = 0.6;
        cfg.confusion[2][3] += 0.1;
        assert!(cfg.validate().is_err());
        assert!(OracleTeacherConfig::uniform(1.2, 30.0, 0)
            .validate()
            .is_err());
        assert!(OracleTeacherConfig::uniform(0.7, 0.0, 0)
            .validate()
            .is_err());
        OracleTeacherConfig::default().validate().unwrap();
    }

    #[test]
    fn labels_carry_timestamp_and_valid_confidence() {
        let mut t = OracleTeacher::new(OracleTeacherConfig::default()).unwrap();
        for i in 0..1000u64 {
            let l = t.label(ActivityClass::Walk, i * 7).unwrap();
            assert_eq!(l.timestamp_ns, i * 7);
            assert!(l.confidence > 0.0 && l.confidence <= 1.0);
        }
        assert_eq!(t.calls(), 1000);
    }
}
