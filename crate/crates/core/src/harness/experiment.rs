use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::{Activation, ExperimentConfig, TeacherKind, TransportKind};
use super::data::{self, seeds};
use super::metrics::LatencyReport;
use crate::adapt::{
    evaluate, AccuracyTable, AdaptationEvent, CycleOutcome, Orchestrator, StageTimings, Trigger,
};
use crate::error::{Error, Result};
use crate::model::{fine_tune, GruParameters};
use crate::net::{
    client_handshake, memory_pair, server_handshake, tcp_connect, Connection, DetectionNode,
    NodeHandle, TrainerListener, TrainingNode,
};
use crate::numerics::RealMatrix;
use crate::sim::ShiftPreset;
use crate::teacher::{
    AttentionConfig, AttentionTeacher, LabelSource, OracleTeacher, OracleTeacherConfig,
};

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub seed: u64,
    pub params: GruParameters,
    pub table: AccuracyTable,
    pub loss_history: Vec<f64>,
}

/// Trains a fresh student on the in-domain recordings of `seed` and scores
/// it on the held-out in-domain recording.
pub fn train_baseline(cfg: &ExperimentConfig, seed: u64) -> Result<BaselineRun> {
    let train = data::training_set(cfg, seed)?;
    let init = GruParameters::init(&cfg.model_config(), seed)?;
    let report = fine_tune(&init, &train, &cfg.baseline_train_config(seed))?;
    let table = evaluate(&report.params, &data::test_set(cfg, seed, false)?)?;
    Ok(BaselineRun {
        seed,
        params: report.params,
        table,
        loss_history: report.loss_history,
    })
}

pub fn evaluate_on(
    cfg: &ExperimentConfig,
    params: &GruParameters,
    seed: u64,
    shifted: bool,
) -> Result<AccuracyTable> {
    evaluate(params, &data::test_set(cfg, seed, shifted)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LoopOutcome {
    Completed { version: u32 },
    Aborted { reason: String },
    NoTrigger,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub seed: u64,
    pub precision: f64,
    pub shifted: AccuracyTable,
    pub recovered: AccuracyTable,
    pub outcome: LoopOutcome,
    pub events: Vec<AdaptationEvent>,
    pub latency: LatencyReport,
    pub teacher_calls_outside: u64,
    pub teacher_calls_inside: u64,
    pub monitored_mean_confidence: Option<f64>,
    /// Weights served by the first node at the end.
    pub final_params: GruParameters,
}

fn build_teacher(
    cfg: &ExperimentConfig,
    seed: u64,
    precision: f64,
) -> Result<Box<dyn LabelSource>> {
    let t = &cfg.teacher;
    Ok(match t.kind {
        TeacherKind::Oracle => Box::new(OracleTeacher::new(OracleTeacherConfig::uniform(
            precision,
            t.rate_hz,
            seed + seeds::TEACHER,
        ))?),
        TeacherKind::Attention => Box::new(AttentionTeacher::train(
            &AttentionConfig::default(),
            t.attention_scenes_per_class,
            t.attention_epochs,
            t.rate_hz,
            seed + seeds::TEACHER,
        )?),
    })
}

/// A trainer with `cfg.net.nodes` connected nodes, all serving `params`.
pub fn connect_nodes(
    cfg: &ExperimentConfig,
    params: &GruParameters,
) -> Result<(TrainingNode, Vec<NodeHandle>)> {
    let mut trainer = TrainingNode::new(params.clone(), 0);
    trainer.ack_timeout = Duration::from_millis(cfg.net.ack_timeout_ms);
    trainer.retries = cfg.net.retries;
    let timeout = Some(Duration::from_millis(cfg.net.ack_timeout_ms));
    let mut nodes = Vec::new();
    let listener = match cfg.net.transport {
        TransportKind::Tcp => Some(TrainerListener::bind(("127.0.0.1", cfg.net.port))?),
        TransportKind::Memory => None,
    };
    for id in 0..cfg.net.nodes {
        let (node_conn, trainer_conn): (Connection, Connection) = match &listener {
            None => {
                let (mut node_end, mut trainer_end) = memory_pair();
                let client = std::thread::spawn(move || -> Result<Connection> {
                    client_handshake(&mut node_end, id, timeout)?;
                    Ok(node_end)
                });
                let got = server_handshake(&mut trainer_end, timeout)?;
                let node_end = client
                    .join()
                    .map_err(|_| Error::State("node connect thread panicked".into()))??;
                if got != id {
                    return Err(Error::State(format!("expected node {id}, got {got}")));
                }
                (node_end, trainer_end)
            }
            Some(l) => {
                let addr = l.local_addr()?;
                let client = std::thread::spawn(move || -> Result<Connection> {
                    let mut c = tcp_connect(addr)?;
                    client_handshake(&mut c, id, timeout)?;
                    Ok(c)
                });
                let (got, conn) = l.accept(timeout)?;
                let node_end = client
                    .join()
                    .map_err(|_| Error::State("node connect thread panicked".into()))??;
                if got != id {
                    return Err(Error::State(format!("expected node {id}, got {got}")));
                }
                (node_end, conn)
            }
        };
        trainer.add_session(id, trainer_conn);
        nodes.push(NodeHandle::start(
            Arc::new(DetectionNode::new(id, params.clone())?),
            node_conn,
        ));
    }
    Ok((trainer, nodes))
}

/// Applies the configured shift to a node serving `baseline`, watches its
/// confidence, runs at most one adaptation cycle and scores the weights the
/// node serves afterwards.
pub fn run_closed_loop(
    cfg: &ExperimentConfig,
    baseline: &GruParameters,
    seed: u64,
    precision: f64,
) -> Result<ClosedLoopRun> {
    let shifted = evaluate_on(cfg, baseline, seed, true)?;
    let (mut trainer, nodes) = connect_nodes(cfg, baseline)?;
    let mut collection = cfg.collection;
    collection.csi_clock.seed = collection.csi_clock.seed.wrapping_add(seed);
    collection.teacher_clock.seed = collection.teacher_clock.seed.wrapping_add(seed);
    let mut orch = Orchestrator::new(
        cfg.policy,
        collection,
        cfg.adaptation_train_config(seed),
        build_teacher(cfg, seed, precision)?,
        0,
    )?;
    orch.net_timeout = Duration::from_millis(cfg.net.ack_timeout_ms.max(1000) * 4);

    // Monitoring: the node classifies the live stream after the shift.
    let shift_applied = cfg.shift != ShiftPreset::None;
    let frames = data::monitor_frames(cfg, seed, shift_applied)?;
    let feats = data::frame_features(&frames)?;
    let w = cfg.generator.window;
    let dim = cfg.feature_dim();
    let mut trigger = None;
    let mut student = Duration::ZERO;
    let mut predictions = 0usize;
    let mut seen = Vec::new();
    let mut start = 0;
    while start + w <= feats.len() && trigger.is_none() {
        let window = RealMatrix::new(
            w,
            dim,
            feats[start..start + w].iter().flatten().copied().collect(),
        )?;
        let now_s = (start + w) as f64 / cfg.generator.rate_hz;
        let t0 = Instant::now();
        let conf = nodes[0].node.predict(&[&window])?[0].confidence;
        student += t0.elapsed();
        predictions += 1;
        seen.push(conf);
        let fired = orch.observe(conf, now_s);
        trigger = match cfg.adaptation.activation {
            Activation::Confidence => fired,
            Activation::ShiftOnset if shift_applied && seen.len() == cfg.policy.window => {
                Some(Trigger {
                    at_s: now_s,
                    mean_confidence: seen.iter().sum::<f64>() / seen.len() as f64,
                })
            }
            Activation::ShiftOnset => None,
        };
        start += cfg.adaptation.monitor_stride;
    }
    let tail = seen.len().min(cfg.policy.window);
    let monitored = (tail > 0).then(|| seen[seen.len() - tail..].iter().sum::<f64>() / tail as f64);

    let mut timings = StageTimings::default();
    let outcome = match trigger {
        None => LoopOutcome::NoTrigger,
        Some(t) => {
            let scene = data::collection_frames(cfg, seed)?;
            let report = orch.run_cycle(t, &nodes[0], &mut trainer, &scene)?;
            timings = report.timings;
            match report.outcome {
                CycleOutcome::Completed { version } => LoopOutcome::Completed { version },
                CycleOutcome::Aborted(r) => LoopOutcome::Aborted {
                    reason: r.to_string(),
                },
            }
        }
    };
    let final_params = nodes[0].node.weights().params.clone();
    let recovered = evaluate_on(cfg, &final_params, seed, true)?;
    let latency = LatencyReport::new(&timings, student.as_secs_f64() * 1e3, predictions);
    drop(trainer);
    for n in nodes {
        n.join()?;
    }
    Ok(ClosedLoopRun {
        seed,
        precision,
        shifted,
        recovered,
        outcome,
        events: orch.events().to_vec(),
        latency,
        teacher_calls_outside: orch.teacher().calls_outside(),
        teacher_calls_inside: orch.teacher().calls_inside(),
        monitored_mean_confidence: monitored,
        final_params,
    })
}

/// Runs `f` for every seed, concurrently when `parallel`, and returns the
/// results in seed order.
pub fn for_seeds<T, F>(seeds: &[u64], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if !parallel {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || f(s))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::State("seed worker panicked".into()))?
            })
            .collect()
    })
}
