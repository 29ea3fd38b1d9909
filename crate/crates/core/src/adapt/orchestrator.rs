use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::collect::{collect_labeled, CollectionConfig, StageTimings};
use super::policy::{AdaptationPolicy, Monitor, Trigger};
use super::state::{AdaptationEvent, EventKind, LoopState, Phase};
use crate::error::{Error, Result};
use crate::model::{fine_tune, TrainConfig, WindowSample};
use crate::net::{DistributionReport, Message, NodeHandle, TrainingNode, WireSample};
use crate::sim::{ActivityClass, LabeledFrame};
use crate::sync::DatasetStats;
use crate::teacher::{LabelSource, TeacherLabel};

/// Wraps a label source so it only answers while collection is open.
/// Calls made while closed are refused and counted.
#[derive(Debug)]
pub struct GatedTeacher<S> {
    inner: S,
    open: bool,
    inside: u64,
    outside: u64,
}

impl<S: LabelSource> GatedTeacher<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            open: false,
            inside: 0,
            outside: 0,
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn calls_inside(&self) -> u64 {
        self.inside
    }

    pub fn calls_outside(&self) -> u64 {
        self.outside
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    fn open(&mut self) {
        self.open = true;
    }

    fn close(&mut self) {
        self.open = false;
    }
}

impl<S: LabelSource> LabelSource for GatedTeacher<S> {
    fn label(&mut self, truth: ActivityClass, timestamp_ns: u64) -> Result<TeacherLabel> {
        if !self.open {
            self.outside += 1;
            return Err(Error::State("teacher invoked outside collection".into()));
        }
        self.inside += 1;
        self.inner.label(truth, timestamp_ns)
    }

    fn rate_hz(&self) -> f64 {
        self.inner.rate_hz()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AbortReason {
    InsufficientSamples {
        emitted: usize,
        required: usize,
    },
    Distribution {
        rejected: Vec<u32>,
        unreachable: Vec<u32>,
    },
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::InsufficientSamples { emitted, required } => {
                write!(f, "insufficient labeled samples: {emitted} < {required}")
            }
            AbortReason::Distribution {
                rejected,
                unreachable,
            } => write!(
                f,
                "distribution failed: rejected by {rejected:?}, unreachable {unreachable:?}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CycleOutcome {
    Completed { version: u32 },
    Aborted(AbortReason),
}

#[derive(Debug, Clone)]
pub struct CycleReport {
    pub outcome: CycleOutcome,
    pub stats: DatasetStats,
    pub timings: StageTimings,
    pub training: Duration,
    pub loss_history: Vec<f64>,
    pub distribution: Option<DistributionReport>,
}

/// The single state machine behind the loop. All transitions go through
/// it; the teacher is open only while collecting.
pub struct Orchestrator<S> {
    policy: AdaptationPolicy,
    collection: CollectionConfig,
    train: TrainConfig,
    teacher: GatedTeacher<S>,
    state: LoopState,
    monitor: Monitor,
    pub net_timeout: Duration,
}

fn metrics<const N: usize>(items: [(&str, f64); N]) -> BTreeMap<String, f64> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl<S: LabelSource> Orchestrator<S> {
    pub fn new(
        policy: AdaptationPolicy,
        collection: CollectionConfig,
        train: TrainConfig,
        teacher: S,
        version: u32,
    ) -> Result<Self> {
        collection.validate()?;
        train.validate()?;
        Ok(Self {
            monitor: Monitor::new(policy)?,
            policy,
            collection,
            train,
            teacher: GatedTeacher::new(teacher),
            state: LoopState::new(version),
            net_timeout: Duration::from_secs(30),
        })
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn events(&self) -> &[AdaptationEvent] {
        self.state.events()
    }

    pub fn teacher(&self) -> &GatedTeacher<S> {
        &self.teacher
    }

    /// Teacher access for instrumentation; calls are gated like any other.
    pub fn teacher_mut(&mut self) -> &mut GatedTeacher<S> {
        &mut self.teacher
    }

    pub fn policy(&self) -> &AdaptationPolicy {
        &self.policy
    }

    pub fn observe(&mut self, confidence: f64, now_s: f64) -> Option<Trigger> {
        if self.state.phase() != Phase::Monitoring {
            return None;
        }
        self.monitor.observe(confidence, now_s)
    }

    /// Runs one full cycle for `node`. `scene` is the CSI the node sees
    /// during collection. On abort or error the trainer keeps its weights
    /// and the loop returns to monitoring.
    pub fn run_cycle(
        &mut self,
        trigger: Trigger,
        node: &NodeHandle,
        trainer: &mut TrainingNode,
        scene: &[LabeledFrame],
    ) -> Result<CycleReport> {
        if self.state.phase() != Phase::Monitoring {
            return Err(Error::State(format!(
                "cycle requested in {:?}",
                self.state.phase()
            )));
        }
        let result = self.cycle_steps(trigger, node, trainer, scene);
        self.teacher.close();
        let now = self
            .state
            .events()
            .last()
            .map_or(trigger.at_s, |e| e.time_s);
        match result {
            Ok(report) => {
                if let CycleOutcome::Aborted(reason) = &report.outcome {
                    self.state.reset();
                    self.state.record(
                        EventKind::Aborted,
                        now,
                        metrics([("emitted", report.stats.emitted as f64)]),
                        Some(reason.to_string()),
                    )?;
                }
                self.monitor.cycle_finished(now);
                Ok(report)
            }
            Err(e) => {
                self.state.reset();
                self.state.record(
                    EventKind::Aborted,
                    now,
                    BTreeMap::new(),
                    Some(e.to_string()),
                )?;
                self.monitor.cycle_finished(now);
                Err(e)
            }
        }
    }

    fn cycle_steps(
        &mut self,
        trigger: Trigger,
        node: &NodeHandle,
        trainer: &mut TrainingNode,
        scene: &[LabeledFrame],
    ) -> Result<CycleReport> {
        let node_id = node.node.id();
        let timeout = Some(self.net_timeout);
        let mut report = CycleReport {
            outcome: CycleOutcome::Completed {
                version: self.state.version(),
            },
            stats: DatasetStats::default(),
            timings: StageTimings::default(),
            training: Duration::ZERO,
            loss_history: Vec::new(),
            distribution: None,
        };

        // 1. update request
        node.send(&Message::UpdateRequest {
            node_id,
            mean_confidence: trigger.mean_confidence,
        })?;
        trainer.expect_update_request(node_id, timeout)?;
        self.state.record(
            EventKind::Trigger,
            trigger.at_s,
            metrics([("mean_confidence", trigger.mean_confidence)]),
            None,
        )?;

        // 2. teacher on, collect, teacher off; 3. pair and label
        self.state.advance(Phase::Collecting)?;
        self.teacher.open();
        let collected = collect_labeled(scene, &mut self.teacher, &self.collection);
        self.teacher.close();
        let collected = collected?;
        report.stats = collected.dataset.stats;
        report.timings = collected.timings;
        let now = trigger.at_s + scene.len() as f64 / self.collection.csi_rate_hz;
        self.state.record(
            EventKind::CollectDone,
            now,
            metrics([
                ("labels", collected.labels as f64),
                ("pairs", collected.pairs as f64),
                ("windows", report.stats.windows as f64),
                ("unmatched", report.stats.unmatched as f64),
                ("dropped", report.stats.dropped() as f64),
                ("emitted", report.stats.emitted as f64),
            ]),
            None,
        )?;
        if report.stats.emitted < self.policy.min_samples {
            report.outcome = CycleOutcome::Aborted(AbortReason::InsufficientSamples {
                emitted: report.stats.emitted,
                required: self.policy.min_samples,
            });
            return Ok(report);
        }

        // 4. upload and fine-tune
        let batch = collected
            .dataset
            .samples
            .iter()
            .map(WireSample::from_example)
            .collect::<Result<Vec<_>>>()?;
        // A batch can exceed the socket buffers, so the trainer must be
        // reading while the node writes.
        let received = std::thread::scope(|scope| -> Result<Vec<WireSample>> {
            let upload = scope.spawn(|| node.send(&Message::LabeledBatch { samples: batch }));
            let received = trainer.expect_batch(node_id, timeout);
            let sent = upload
                .join()
                .map_err(|_| Error::State("batch upload panicked".into()))?;
            sent?;
            Ok(received?)
        })?;
        let samples = received
            .iter()
            .map(WireSample::to_window_sample)
            .collect::<Result<Vec<WindowSample>>>()?;
        self.state.advance(Phase::Training)?;
        let t0 = Instant::now();
        let trained = fine_tune(trainer.params(), &samples, &self.train)?;
        report.training = t0.elapsed();
        report.loss_history = trained.loss_history;
        self.state.record(
            EventKind::TrainDone,
            now,
            metrics([
                ("samples", samples.len() as f64),
                ("epochs", report.loss_history.len() as f64),
                (
                    "final_loss",
                    report.loss_history.last().copied().unwrap_or(f64::NAN),
                ),
            ]),
            None,
        )?;

        // 5. distribute
        self.state.advance(Phase::Distributing)?;
        let previous = trainer.params().clone();
        let version = trainer.version() + 1;
        let dist = trainer.distribute(version, &trained.params)?;
        report.distribution = Some(dist.clone());
        if !dist.all_acked() {
            if !dist.acked.is_empty() {
                // Nodes that took the new weights get the old ones back under
                // a fresh version; the trainer follows.
                let back = trainer.distribute(version + 1, &previous)?;
                trainer.commit(version + 1, previous);
                self.state.set_version(version + 1);
                report.distribution = Some(back);
            }
            report.outcome = CycleOutcome::Aborted(AbortReason::Distribution {
                rejected: dist.rejected,
                unreachable: dist.unreachable,
            });
            return Ok(report);
        }
        trainer.commit(version, trained.params);
        self.state.set_version(version);
        self.state.advance(Phase::Monitoring)?;
        self.state.record(
            EventKind::DistributeDone,
            now,
            metrics([
                ("version", version as f64),
                ("acked", dist.acked.len() as f64),
                ("sends", dist.sends as f64),
            ]),
            None,
        )?;
        report.outcome = CycleOutcome::Completed { version };
        Ok(report)
    }
}
