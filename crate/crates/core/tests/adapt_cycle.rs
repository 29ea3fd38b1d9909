use std::sync::Arc;
use std::time::Duration;

use csiloop_core::adapt::*;
use csiloop_core::model::{GruParameters, ModelConfig, TrainConfig};
use csiloop_core::net::*;
use csiloop_core::sim::*;
use csiloop_core::teacher::{LabelSource, OracleTeacher, OracleTeacherConfig};

fn base() -> GruParameters {
    GruParameters::init(
        &ModelConfig {
            input_dim: 52,
            hidden_dim: 6,
            layers: 1,
            classes: 8,
        },
        3,
    )
    .unwrap()
}

fn bits(p: &GruParameters) -> Vec<u64> {
    p.to_flat().iter().map(|v| v.to_bits()).collect()
}

struct Rig {
    trainer: TrainingNode,
    nodes: Vec<NodeHandle>,
}

fn rig(nodes: u32) -> Rig {
    let mut trainer = TrainingNode::new(base(), 0);
    trainer.ack_timeout = Duration::from_millis(300);
    let mut handles = Vec::new();
    for id in 0..nodes {
        let (mut a, mut b) = memory_pair();
        let h = std::thread::spawn(move || {
            server_handshake(&mut b, None).unwrap();
            b
        });
        client_handshake(&mut a, id, None).unwrap();
        trainer.add_session(id, h.join().unwrap());
        handles.push(NodeHandle::start(
            Arc::new(DetectionNode::new(id, base()).unwrap()),
            a,
        ));
    }
    Rig {
        trainer,
        nodes: handles,
    }
}

fn scene() -> Vec<LabeledFrame> {
    let shifted =
        apply_domain_shift(&ChannelProfile::reference(52), &ShiftPreset::Severe.spec()).unwrap();
    generate_stream(
        &balanced_schedule(2.5, 1, 8),
        &shifted,
        CsiShape::default(),
        100.0,
        8,
    )
    .unwrap()
}

fn orchestrator(collection: CollectionConfig) -> Orchestrator<OracleTeacher> {
    let policy = AdaptationPolicy {
        collection_s: 20.0,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::adaptation(1)
    };
    let teacher = OracleTeacher::new(OracleTeacherConfig::uniform(1.0, 30.0, 2)).unwrap();
    Orchestrator::new(policy, collection, train, teacher, 0).unwrap()
}

fn trigger() -> Trigger {
    Trigger {
        at_s: 10.0,
        mean_confidence: 0.4,
    }
}

#[test]
fn successful_cycle_logs_four_events_and_bumps_version() {
    let mut r = rig(2);
    let mut o = orchestrator(CollectionConfig::default());
    let before = bits(&base());
    let rep = o
        .run_cycle(trigger(), &r.nodes[0], &mut r.trainer, &scene())
        .unwrap();
    assert_eq!(rep.outcome, CycleOutcome::Completed { version: 1 });
    assert_eq!(o.state().version(), 1);
    assert_eq!(o.state().phase(), Phase::Monitoring);
    let kinds: Vec<EventKind> = o.events().iter().map(|e| e.kind).collect();
    assert_eq!(
        kinds,
        [
            EventKind::Trigger,
            EventKind::CollectDone,
            EventKind::TrainDone,
            EventKind::DistributeDone
        ]
    );
    assert!(o.events().windows(2).all(|w| w[0].time_s <= w[1].time_s));
    assert!(o.events().iter().all(|e| e.cycle == 1));
    assert_eq!(o.events()[1].time_s, 30.0);
    assert_ne!(bits(r.trainer.params()), before);
    for n in &r.nodes {
        assert_eq!(n.node.version(), 1);
        assert_eq!(bits(&n.node.weights().params), bits(r.trainer.params()));
    }
    assert_eq!(o.teacher().calls_outside(), 0);
    assert_eq!(o.teacher().calls_inside(), 600);
    assert!(!o.teacher().is_open());
}

#[test]
fn zero_matches_abort_with_weights_untouched() {
    let mut r = rig(1);
    let mut cfg = CollectionConfig::default();
    cfg.teacher_clock.offset_ns = 3_600_000_000_000;
    let mut o = orchestrator(cfg);
    let before = bits(&base());
    let rep = o
        .run_cycle(trigger(), &r.nodes[0], &mut r.trainer, &scene())
        .unwrap();
    assert!(matches!(
        rep.outcome,
        CycleOutcome::Aborted(AbortReason::InsufficientSamples { emitted: 0, .. })
    ));
    assert_eq!(rep.stats.unmatched, rep.stats.windows);
    assert_eq!(bits(r.trainer.params()), before);
    assert_eq!(bits(&r.nodes[0].node.weights().params), before);
    assert_eq!(r.trainer.version(), 0);
    assert_eq!(o.state().phase(), Phase::Monitoring);
    assert_eq!(o.events().last().unwrap().kind, EventKind::Aborted);
    assert!(!o.teacher().is_open());
}

#[test]
fn failed_distribution_rolls_acked_nodes_back() {
    let mut r = rig(1);
    let (_silent, dead) = memory_pair();
    r.trainer.add_session(9, dead);
    let mut o = orchestrator(CollectionConfig::default());
    let before = bits(&base());
    let rep = o
        .run_cycle(trigger(), &r.nodes[0], &mut r.trainer, &scene())
        .unwrap();
    match rep.outcome {
        CycleOutcome::Aborted(AbortReason::Distribution { unreachable, .. }) => {
            assert_eq!(unreachable, vec![9])
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(bits(r.trainer.params()), before);
    assert_eq!(bits(&r.nodes[0].node.weights().params), before);
    assert_eq!(r.nodes[0].node.version(), 2);
    assert_eq!(o.state().phase(), Phase::Monitoring);
}

#[test]
fn teacher_refuses_outside_collection() {
    let mut o = orchestrator(CollectionConfig::default());
    assert!(o.teacher_mut().label(ActivityClass::Walk, 0).is_err());
    assert_eq!(o.teacher().calls_outside(), 1);
    assert_eq!(o.teacher().inner().calls(), 0);
}

#[test]
fn monitor_is_paused_outside_monitoring_and_cools_down_after_cycle() {
    let mut r = rig(1);
    let mut o = orchestrator(CollectionConfig::default());
    let t = (0..50)
        .find_map(|i| o.observe(0.1, i as f64 * 0.02))
        .unwrap();
    o.run_cycle(t, &r.nodes[0], &mut r.trainer, &scene())
        .unwrap();
    let end = o.events().last().unwrap().time_s;
    assert!((0..200).all(|i| o.observe(0.1, end + i as f64 * 0.1).is_none()));
    assert!((0..50).any(|i| o.observe(0.1, end + 121.0 + i as f64).is_some()));
}
