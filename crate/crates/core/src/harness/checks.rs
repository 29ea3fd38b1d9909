use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{batch_loss, bptt_gradients, predict_batch, GruParameters, ModelConfig};
use crate::net::{
    client_handshake, decode, encode, tcp_connect, AckStatus, Decoded, DetectionNode, Message,
    NodeHandle, TrainerListener, TrainingNode, WireSample, MAGIC, PROTOCOL_VERSION,
};
use crate::numerics::RealMatrix;
use crate::sim::ActivityClass;
use crate::sync::{pair_streams, pair_streams_brute_force, ClockModel, StreamClock, SyncConfig};
use crate::teacher::{AttentionClassifier, AttentionConfig, FeatureMap, TeacherLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error, where the property has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub passed: bool,
    pub seconds: f64,
    pub properties: Vec<PropertyResult>,
}

impl CheckReport {
    fn new(check: &str, started: Instant, properties: Vec<PropertyResult>) -> Self {
        Self {
            check: check.to_string(),
            passed: properties.iter().all(|p| p.passed),
            seconds: started.elapsed().as_secs_f64(),
            properties,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Added to one recurrent candidate-gate gradient entry, to prove the
    /// check can fail.
    pub fault: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 10,
            tolerance: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

const FD_STEP: f64 = 1e-5;

fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6)
}

/// Worst relative error between `analytic` and central differences of
/// `loss` around `base`.
fn compare_fd(
    base: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut x = base.to_vec();
    for i in 0..base.len() {
        x[i] = base[i] + FD_STEP;
        let lp = loss(&x)?;
        x[i] = base[i] - FD_STEP;
        let lm = loss(&x)?;
        x[i] = base[i];
        worst = worst.max(relative_error((lp - lm) / (2.0 * FD_STEP), analytic[i]));
    }
    Ok(worst)
}

fn gru_instance(rng: &mut ChaCha8Rng, fault: Option<f64>) -> Result<f64> {
    let cfg = ModelConfig {
        input_dim: 3,
        hidden_dim: 4,
        layers: 3,
        classes: 3,
    };
    let mut p = GruParameters::init(&cfg, rng.random())?;
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    let windows: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    let (mut grads, _) = bptt_gradients(&p, &views, &labels)?;
    if let Some(d) = fault {
        grads.layers[0].u_h[[0, 0]] += d;
    }
    let base = p.to_flat();
    let mut probe = p.clone();
    compare_fd(&base, &grads.to_flat(), |x| {
        probe.copy_from_flat(x)?;
        batch_loss(&probe, &views, &labels)
    })
}

fn attention_instance(rng: &mut ChaCha8Rng, spatial: bool) -> Result<f64> {
    let cfg = AttentionConfig {
        channels: 4,
        mid: 2,
        height: 5,
        width: 6,
        classes: 3,
        use_spatial: spatial,
        bypass_channel: false,
    };
    let mut clf = AttentionClassifier::new(&cfg, rng.random())?;
    let batch: Vec<(FeatureMap, usize)> = (0..3)
        .map(|_| {
            let data = (0..4 * 5 * 6)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Ok((FeatureMap::new(4, 5, 6, data)?, rng.random_range(0..3)))
        })
        .collect::<Result<_>>()?;
    let (grads, _) = clf.gradients(&batch)?;
    let base = clf.params.to_flat();
    compare_fd(&base, &grads.to_flat(), |x| {
        clf.params.copy_from_flat(x)?;
        clf.loss(&batch)
    })
}

fn property(name: &str, errors: &[Result<f64>], tolerance: f64) -> PropertyResult {
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut detail = String::new();
    for (i, e) in errors.iter().enumerate() {
        match e {
            Ok(v) => {
                worst = worst.max(*v);
                if !(*v < tolerance) {
                    failures += 1;
                }
            }
            Err(err) => {
                failures += 1;
                detail = format!("instance {i}: {err}");
            }
        }
    }
    if detail.is_empty() {
        detail = format!("max relative error {worst:.3e} (limit {tolerance:.0e})");
    }
    PropertyResult {
        name: name.to_string(),
        passed: failures == 0,
        cases: errors.len(),
        failures,
        worst: Some(worst),
        detail,
    }
}

/// Analytic gradients of the student and the attention block against
/// central finite differences.
pub fn gradcheck(opts: &GradcheckOptions) -> CheckReport {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let gru: Vec<Result<f64>> = (0..opts.instances)
        .map(|_| gru_instance(&mut rng, opts.fault))
        .collect();
    let att: Vec<Result<f64>> = (0..opts.instances)
        .map(|i| attention_instance(&mut rng, i % 2 == 0))
        .collect();
    CheckReport::new(
        "gradcheck",
        started,
        vec![
            property("gru-bptt", &gru, opts.tolerance),
            property("attention-block", &att, opts.tolerance),
        ],
    )
}

struct SyncCase {
    csi: Vec<u64>,
    labels: Vec<TeacherLabel>,
    config: SyncConfig,
}

fn sync_case(rng: &mut ChaCha8Rng) -> Result<SyncCase> {
    let csi_rate = rng.random_range(10.0..200.0);
    let label_rate = rng.random_range(10.0..200.0);
    let seconds = rng.random_range(2.0..20.0);
    let stream = |rate: f64, model: ClockModel| -> Result<Vec<u64>> {
        let n = (seconds * rate) as u64;
        let elapsed: Vec<u64> = (0..n).map(|k| (k as f64 * 1e9 / rate) as u64).collect();
        Ok(StreamClock::new(model)?.stamp_all(&elapsed))
    };
    let epoch = 1_000_000_000;
    let csi = stream(
        csi_rate,
        ClockModel {
            pps_epoch_ns: epoch,
            offset_ns: rng.random_range(-50_000_000..50_000_000),
            jitter_std_ns: rng.random_range(0.0..3e6),
            drift_ppm: rng.random_range(-50.0..50.0),
            seed: rng.random(),
        },
    )?;
    let label_ts = stream(
        label_rate,
        ClockModel {
            pps_epoch_ns: epoch,
            offset_ns: rng.random_range(-50_000_000..50_000_000),
            jitter_std_ns: rng.random_range(0.0..3e6),
            drift_ppm: rng.random_range(-50.0..50.0),
            seed: rng.random(),
        },
    )?;
    let labels = label_ts
        .into_iter()
        .map(|t| TeacherLabel {
            class: ActivityClass::ALL[rng.random_range(0..ActivityClass::COUNT)],
            confidence: 1.0,
            timestamp_ns: t,
        })
        .collect();
    let config = SyncConfig {
        epsilon_ns: rng.random_range(500_000..30_000_000),
        ..Default::default()
    };
    Ok(SyncCase {
        csi,
        labels,
        config,
    })
}

/// Fast pairing against the quadratic oracle on randomized stream pairs.
pub fn synccheck(cases: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mismatches, mut violations, mut pairs) = (0usize, 0usize, 0usize);
    let mut detail = String::new();
    for i in 0..cases {
        let outcome = sync_case(&mut rng).and_then(|c| {
            let fast = pair_streams(&c.csi, &c.labels, &c.config)?;
            let slow = pair_streams_brute_force(&c.csi, &c.labels, &c.config)?;
            Ok((fast, slow, c.config.epsilon_ns))
        });
        match outcome {
            Ok((fast, slow, eps)) => {
                pairs += fast.pairs.len();
                if fast != slow {
                    mismatches += 1;
                    detail = format!("case {i}: pairing differs from oracle");
                }
                violations += fast.pairs.iter().filter(|p| p.delta_ns > eps).count();
            }
            Err(e) => {
                mismatches += 1;
                detail = format!("case {i}: {e}");
            }
        }
    }
    CheckReport::new(
        "synccheck",
        started,
        vec![
            PropertyResult {
                name: "oracle-equivalence".into(),
                passed: mismatches == 0,
                cases,
                failures: mismatches,
                worst: None,
                detail: if detail.is_empty() {
                    format!("{cases} stream pairs identical to brute force")
                } else {
                    detail
                },
            },
            PropertyResult {
                name: "epsilon-bound".into(),
                passed: violations == 0,
                cases: pairs,
                failures: violations,
                worst: None,
                detail: format!("{pairs} pairs checked, {violations} beyond epsilon"),
            },
        ],
    )
}

fn random_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => 0.0,
        1 => rng.random_range(-1.0..1.0),
        2 => rng.random_range(-1e300..1e300),
        _ => {
            f64::from_bits(rng.random::<u64>() & !(0x7ff << 52))
                * if rng.random() { 1.0 } else { -1.0 }
        }
    }
}

/// Arbitrary well-formed message of any kind.
pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.random_range(0..6) {
        0 => Message::UpdateRequest {
            node_id: rng.random(),
            mean_confidence: random_f64(rng),
        },
        1 => Message::LabeledBatch {
            samples: (0..rng.random_range(0..4))
                .map(|_| {
                    let rows = rng.random_range(0..5u32);
                    let cols = rng.random_range(0..5u32);
                    WireSample {
                        label: rng.random(),
                        rows,
                        cols,
                        values: (0..rows * cols).map(|_| random_f64(rng)).collect(),
                    }
                })
                .collect(),
        },
        2 => Message::WeightPackage {
            version: rng.random(),
            checkpoint: (0..rng.random_range(0..200))
                .map(|_| rng.random())
                .collect(),
            checksum: rng.random(),
        },
        3 => Message::Ack {
            ref_version: rng.random(),
            status: if rng.random() {
                AckStatus::Ok
            } else {
                AckStatus::Reject
            },
        },
        4 => Message::Hello {
            node_id: rng.random(),
        },
        _ => Message::Refused {
            reason: (0..rng.random_range(0..40))
                .map(|_| char::from(rng.random_range(b' '..b'~')))
                .collect(),
        },
    }
}

fn round_trip(m: &Message) -> std::result::Result<(), String> {
    let bytes = encode(m).map_err(|e| e.to_string())?;
    match decode(&bytes) {
        Ok(Decoded::Frame { message, consumed }) if consumed == bytes.len() => {
            let again = encode(&message).map_err(|e| e.to_string())?;
            if message != *m || again != bytes {
                return Err(format!("{} did not survive a round trip", m.kind()));
            }
            Ok(())
        }
        other => Err(format!("{} decoded as {other:?}", m.kind())),
    }
}

/// Fuzz input: random bytes, or a valid frame with a few bytes mutated,
/// truncated or extended.
fn fuzz_input(rng: &mut ChaCha8Rng) -> Vec<u8> {
    match rng.random_range(0..3) {
        0 => (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
        1 => {
            let mut b = MAGIC.to_vec();
            b.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
            b.extend((0..rng.random_range(0..40)).map(|_| rng.random::<u8>()));
            b
        }
        _ => {
            let mut b = encode(&random_message(rng)).unwrap_or_default();
            for _ in 0..rng.random_range(1..4) {
                if b.is_empty() {
                    break;
                }
                let i = rng.random_range(0..b.len());
                match rng.random_range(0..3) {
                    0 => b[i] = rng.random(),
                    1 => b.truncate(i),
                    _ => b.insert(i, rng.random()),
                }
            }
            b
        }
    }
}

/// Checkpoint over TCP loopback: bit-identical weights and predictions.
pub fn tcp_checkpoint_fidelity(seed: u64) -> Result<bool> {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden_dim: 8,
        layers: 3,
        classes: ActivityClass::COUNT,
    };
    let old = GruParameters::init(&cfg, seed)?;
    let new = GruParameters::init(&cfg, seed + 1)?;
    let listener = TrainerListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let timeout = Some(Duration::from_secs(10));
    let client = std::thread::spawn(move || -> Result<_> {
        let mut c = tcp_connect(addr)?;
        client_handshake(&mut c, 0, timeout)?;
        Ok(c)
    });
    let (id, conn) = listener.accept(timeout)?;
    let node_conn = client.join().expect("client thread")?;
    let node = NodeHandle::start(std::sync::Arc::new(DetectionNode::new(id, old)?), node_conn);
    let mut trainer = TrainingNode::new(new.clone(), 0);
    trainer.add_session(id, conn);
    let report = trainer.distribute(1, &new)?;
    let served = node.node.weights();
    let bits = |p: &GruParameters| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe: Vec<RealMatrix> = (0..8)
        .map(|_| RealMatrix::new(10, 6, (0..60).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let refs: Vec<&RealMatrix> = probe.iter().collect();
    let same = report.all_acked()
        && served.version == 1
        && bits(&served.params) == bits(&new)
        && node.node.predict(&refs)? == predict_batch(&new, &refs)?;
    drop(trainer);
    node.join()?;
    Ok(same)
}

/// Codec round trips, decoder fuzzing and checkpoint transfer.
pub fn protofuzz(cases: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt_failures = 0;
    let mut rt_detail = String::new();
    for _ in 0..cases {
        if let Err(e) = round_trip(&random_message(&mut rng)) {
            rt_failures += 1;
            rt_detail = e;
        }
    }
    let (mut crashes, mut frames, mut incomplete, mut errors) = (0, 0, 0, 0);
    for _ in 0..cases {
        let input = fuzz_input(&mut rng);
        match catch_unwind(AssertUnwindSafe(|| decode(&input))) {
            Err(_) => crashes += 1,
            Ok(Ok(Decoded::Frame { .. })) => frames += 1,
            Ok(Ok(Decoded::Incomplete { .. })) => incomplete += 1,
            Ok(Err(_)) => errors += 1,
        }
    }
    let fidelity = tcp_checkpoint_fidelity(seed);
    CheckReport::new(
        "protofuzz",
        started,
        vec![
            PropertyResult {
                name: "round-trip".into(),
                passed: rt_failures == 0,
                cases,
                failures: rt_failures,
                worst: None,
                detail: if rt_detail.is_empty() {
                    "decode(encode(m)) = m and re-encoding is byte-identical".into()
                } else {
                    rt_detail
                },
            },
            PropertyResult {
                name: "fuzz-no-crash".into(),
                passed: crashes == 0,
                cases,
                failures: crashes,
                worst: None,
                detail: format!(
                    "{frames} frames, {incomplete} incomplete, {errors} errors, {crashes} panics"
                ),
            },
            PropertyResult {
                name: "tcp-checkpoint-fidelity".into(),
                passed: matches!(fidelity, Ok(true)),
                cases: 1,
                failures: usize::from(!matches!(fidelity, Ok(true))),
                worst: None,
                detail: match fidelity {
                    Ok(true) => "bit-identical weights and predictions".into(),
                    Ok(false) => "weights or predictions differ".into(),
                    Err(e) => e.to_string(),
                },
            },
        ],
    )
}
