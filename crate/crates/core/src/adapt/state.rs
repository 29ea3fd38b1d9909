use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Monitoring,
    Collecting,
    Training,
    Distributing,
}

impl Phase {
    pub fn next(self) -> Phase {
        match self {
            Phase::Monitoring => Phase::Collecting,
            Phase::Collecting => Phase::Training,
            Phase::Training => Phase::Distributing,
            Phase::Distributing => Phase::Monitoring,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Trigger,
    CollectDone,
    TrainDone,
    DistributeDone,
    Aborted,
}

/// One line of the event log. `time_s` is simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub cycle: u32,
    pub kind: EventKind,
    pub time_s: f64,
    /// State after the event.
    pub state: Phase,
    pub version: u32,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    phase: Phase,
    version: u32,
    cycle: u32,
    events: Vec<AdaptationEvent>,
}

impl LoopState {
    pub fn new(version: u32) -> Self {
        Self {
            phase: Phase::Monitoring,
            version,
            cycle: 0,
            events: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Number of cycles started so far.
    pub fn cycle(&self) -> u32 {
        self.cycle
    }

    pub fn events(&self) -> &[AdaptationEvent] {
        &self.events
    }

    /// Moves one step along the cycle; anything else is an error.
    pub fn advance(&mut self, to: Phase) -> Result<()> {
        if self.phase.next() != to {
            return Err(Error::State(format!(
                "illegal transition {:?} -> {:?}",
                self.phase, to
            )));
        }
        if to == Phase::Collecting {
            self.cycle += 1;
        }
        self.phase = to;
        Ok(())
    }

    pub(crate) fn set_version(&mut self, version: u32) {
        self.version = version;
    }

    pub(crate) fn reset(&mut self) {
        self.phase = Phase::Monitoring;
    }

    /// Appends an event stamped with the current state. A trigger is counted
    /// in the cycle it opens.
    pub fn record(
        &mut self,
        kind: EventKind,
        time_s: f64,
        metrics: BTreeMap<String, f64>,
        reason: Option<String>,
    ) -> Result<()> {
        if let Some(last) = self.events.last() {
            if time_s < last.time_s {
                return Err(Error::State(format!(
                    "event time {time_s} s precedes {} s",
                    last.time_s
                )));
            }
        }
        let cycle = match kind {
            EventKind::Trigger => self.cycle + 1,
            _ => self.cycle,
        };
        self.events.push(AdaptationEvent {
            cycle,
            kind,
            time_s,
            state: self.phase,
            version: self.version,
            metrics,
            reason,
        });
        Ok(())
    }
}

/// Line-delimited JSON, one event per line.
pub fn write_events<W: Write>(events: &[AdaptationEvent], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_order_is_enforced() {
        let mut s = LoopState::new(0);
        assert!(s.advance(Phase::Training).is_err());
        for p in [
            Phase::Collecting,
            Phase::Training,
            Phase::Distributing,
            Phase::Monitoring,
        ] {
            s.advance(p).unwrap();
        }
        assert_eq!(s.cycle(), 1);
        assert!(s.advance(Phase::Monitoring).is_err());
    }

    #[test]
    fn events_are_monotone_and_serialize_as_lines() {
        let mut s = LoopState::new(3);
        s.record(EventKind::Trigger, 1.0, BTreeMap::new(), None)
            .unwrap();
        assert!(s
            .record(EventKind::CollectDone, 0.5, BTreeMap::new(), None)
            .is_err());
        s.record(
            EventKind::Aborted,
            1.0,
            BTreeMap::from([("samples".to_string(), 2.0)]),
            Some("few".into()),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_events(s.events(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"kind\":\"trigger\""));
        assert!(lines[0].contains("\"state\":\"MONITORING\""));
        assert!(!lines[0].contains("reason"));
        let back: AdaptationEvent = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, s.events()[1]);
    }
}
