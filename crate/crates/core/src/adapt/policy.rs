use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationPolicy {
    /// Trigger when the windowed mean confidence falls below this.
    pub threshold: f64,
    /// Number of predictions averaged.
    pub window: usize,
    /// Simulated seconds between the end of one cycle and the next trigger.
    pub cooldown_s: f64,
    pub min_samples: usize,
    pub collection_s: f64,
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.55,
            window: 50,
            cooldown_s: 120.0,
            min_samples: 16,
            collection_s: 60.0,
        }
    }
}

impl AdaptationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if self.window == 0 || self.min_samples == 0 {
            return Err(Error::invalid("window and min_samples must be positive"));
        }
        if !(self.collection_s > 0.0 && self.collection_s.is_finite()) {
            return Err(Error::invalid(format!(
                "collection duration {} s must be positive",
                self.collection_s
            )));
        }
        if !(self.cooldown_s.is_finite() && self.cooldown_s >= self.collection_s) {
            return Err(Error::invalid(format!(
                "cooldown {} s must be at least the collection duration {} s",
                self.cooldown_s, self.collection_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trigger {
    pub at_s: f64,
    pub mean_confidence: f64,
}

/// Windowed mean of recent prediction confidences with a cooldown.
#[derive(Debug, Clone)]
pub struct Monitor {
    policy: AdaptationPolicy,
    recent: VecDeque<f64>,
    last_cycle_end_s: Option<f64>,
}

impl Monitor {
    pub fn new(policy: AdaptationPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            recent: VecDeque::with_capacity(policy.window),
            policy,
            last_cycle_end_s: None,
        })
    }

    pub fn policy(&self) -> &AdaptationPolicy {
        &self.policy
    }

    /// Mean of the last `window` confidences, once that many were seen.
    pub fn mean(&self) -> Option<f64> {
        (self.recent.len() == self.policy.window)
            .then(|| self.recent.iter().sum::<f64>() / self.policy.window as f64)
    }

    pub fn observe(&mut self, confidence: f64, now_s: f64) -> Option<Trigger> {
        if self.recent.len() == self.policy.window {
            self.recent.pop_front();
        }
        self.recent.push_back(confidence);
        let mean = self.mean()?;
        let cooled = self
            .last_cycle_end_s
            .map_or(true, |t| now_s - t >= self.policy.cooldown_s);
        (mean < self.policy.threshold && cooled).then_some(Trigger {
            at_s: now_s,
            mean_confidence: mean,
        })
    }

    /// Starts the cooldown and forgets the window.
    pub fn cycle_finished(&mut self, now_s: f64) {
        self.last_cycle_end_s = Some(now_s);
        self.recent.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(threshold: f64, window: usize) -> AdaptationPolicy {
        AdaptationPolicy {
            threshold,
            window,
            ..Default::default()
        }
    }

    fn first_trigger(m: &mut Monitor, conf: impl Fn(usize) -> f64, n: usize) -> Option<usize> {
        (0..n).find(|&i| m.observe(conf(i), i as f64 * 0.01).is_some())
    }

    #[test]
    fn high_confidence_never_triggers() {
        let mut m = Monitor::new(policy(0.6, 50)).unwrap();
        assert_eq!(first_trigger(&mut m, |_| 0.95, 5000), None);
    }

    #[test]
    fn low_confidence_triggers_on_first_full_window() {
        let mut m = Monitor::new(policy(0.6, 50)).unwrap();
        assert_eq!(first_trigger(&mut m, |_| 0.3, 5000), Some(49));
    }

    #[test]
    fn alternating_mean_against_threshold() {
        let alt = |i: usize| if i % 2 == 0 { 0.2 } else { 0.9 };
        let mut m = Monitor::new(policy(0.5, 10)).unwrap();
        assert_eq!(first_trigger(&mut m, alt, 1000), None);
        let mut m = Monitor::new(policy(0.6, 10)).unwrap();
        assert_eq!(first_trigger(&mut m, alt, 1000), Some(9));
    }

    #[test]
    fn cooldown_suppresses_retrigger() {
        let mut m = Monitor::new(policy(0.6, 5)).unwrap();
        m.cycle_finished(100.0);
        for i in 0..10 {
            assert!(m.observe(0.1, 100.0 + i as f64).is_none());
        }
        assert!(m.observe(0.1, 220.0).is_some());
    }

    #[test]
    fn validation() {
        assert!(AdaptationPolicy::default().validate().is_ok());
        assert!(policy(1.0, 5).validate().is_err());
        assert!(policy(0.5, 0).validate().is_err());
        let short = AdaptationPolicy {
            cooldown_s: 30.0,
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }
}
