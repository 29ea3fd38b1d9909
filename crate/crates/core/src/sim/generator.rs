use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ActivityClass, ChannelProfile};
use crate::error::{Error, Result};

/// 802.11 OFDM subcarrier spacing.
pub const SUBCARRIER_SPACING_HZ: f64 = 312.5e3;

/// `(activity, duration in seconds)` segments played back to back.
pub type Schedule = Vec<(ActivityClass, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsiShape {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_sub: usize,
}

impl CsiShape {
    pub fn new(n_tx: usize, n_rx: usize, n_sub: usize) -> Result<Self> {
        let shape = Self { n_tx, n_rx, n_sub };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 || self.n_sub == 0 {
            return Err(Error::invalid(format!(
                "CSI shape {self:?} has a zero dimension"
            )));
        }
        if self.n_tx > u16::MAX as usize
            || self.n_rx > u16::MAX as usize
            || self.n_sub > u16::MAX as usize
        {
            return Err(Error::invalid(format!(
                "CSI shape {self:?} exceeds u16 dimensions"
            )));
        }
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.n_tx * self.n_rx
    }

    pub fn len(&self) -> usize {
        self.pairs() * self.n_sub
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for CsiShape {
    fn default() -> Self {
        Self {
            n_tx: 1,
            n_rx: 1,
            n_sub: 52,
        }
    }
}

/// One timestamped CSI measurement, stored `(tx, rx, subcarrier)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiFrame {
    pub timestamp_ns: u64,
    pub shape: CsiShape,
    pub values: Vec<Complex64>,
}

impl CsiFrame {
    pub fn new(timestamp_ns: u64, shape: CsiShape, values: Vec<Complex64>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "frame of shape {shape:?} given {} values",
                values.len()
            )));
        }
        Ok(Self {
            timestamp_ns,
            shape,
            values,
        })
    }

    /// Subcarrier response of one antenna pair.
    pub fn pair(&self, tx: usize, rx: usize) -> &[Complex64] {
        let k = self.shape.n_sub;
        let start = (tx * self.shape.n_rx + rx) * k;
        &self.values[start..start + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: CsiFrame,
    pub label: ActivityClass,
}

/// Every class once per round, in a seeded order per round.
pub fn balanced_schedule(segment_s: f64, rounds: usize, seed: u64) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rounds * ActivityClass::COUNT);
    for _ in 0..rounds {
        let mut order = ActivityClass::ALL;
        order.shuffle(&mut rng);
        out.extend(order.iter().map(|&c| (c, segment_s)));
    }
    out
}

/// Per-segment variability: how this "subject" performs the motion.
#[derive(Debug, Clone, Copy)]
struct Performance {
    speed: f64,
    amplitude: f64,
    delay_offset_ns: f64,
    phase: f64,
    phase2: f64,
}

impl Performance {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            speed: rng.random_range(0.85..1.15),
            amplitude: rng.random_range(0.85..1.15),
            delay_offset_ns: rng.random_range(-15.0..15.0),
            phase: rng.random_range(0.0..1.0),
            phase2: rng.random_range(0.0..TAU),
        }
    }
}

/// Body reflection `(delay ns, amplitude)` for the two dominant scatterers.
fn body_paths(class: ActivityClass, t: f64, p: &Performance) -> [(f64, f64); 2] {
    let t = t * p.speed;
    let cycle = |period: f64| (t / period + p.phase).fract();
    let sin = |f: f64, ph: f64| (TAU * f * t + ph).sin();
    let (delay, amp) = match class {
        ActivityClass::LieDown => (
            510.0 + 6.0 * sin(0.25, p.phase2),
            0.30 * (1.0 + 0.05 * sin(0.25, p.phase2)),
        ),
        ActivityClass::Fall => {
            let u = cycle(2.4);
            if u < 0.15 {
                let k = u / 0.15;
                (240.0 + 120.0 * k * k, 0.55 - 0.13 * k)
            } else {
                (360.0 + 4.0 * sin(3.0, p.phase2), 0.42)
            }
        }
        ActivityClass::Walk => (
            400.0 + 50.0 * sin(0.7, p.phase2),
            0.40 * (1.0 + 0.25 * sin(1.8, p.phase2 * 0.5)),
        ),
        ActivityClass::Pickup => {
            let bump = (PI * cycle(2.0)).sin().powi(2);
            (200.0 + 70.0 * bump, 0.45 - 0.12 * bump)
        }
        ActivityClass::Run => (
            620.0 + 70.0 * sin(1.6, p.phase2),
            0.50 * (1.0 + 0.30 * sin(3.6, p.phase2 * 0.5)),
        ),
        ActivityClass::SitDown => {
            let u = (cycle(2.0) / 0.8).min(1.0);
            (330.0 - 110.0 * u, 0.48 - 0.10 * u)
        }
        ActivityClass::StandUp => {
            let u = (cycle(2.0) / 0.8).min(1.0);
            (220.0 + 110.0 * u, 0.38 + 0.10 * u)
        }
        ActivityClass::Presence => (500.0, 0.03),
    };
    // secondary scatterer (limbs/torso split) differs by posture
    let (lag, ratio) = match class {
        ActivityClass::LieDown => (60.0, 0.55),
        ActivityClass::Fall => (90.0, 0.35),
        ActivityClass::Walk => (120.0, 0.30),
        ActivityClass::Pickup => (70.0, 0.50),
        ActivityClass::Run => (150.0, 0.25),
        ActivityClass::SitDown => (80.0, 0.45),
        ActivityClass::StandUp => (110.0, 0.30),
        ActivityClass::Presence => (90.0, 0.35),
    };
    let delay = delay + p.delay_offset_ns;
    let amp = amp * p.amplitude;
    [(delay, amp), (delay + lag, ratio * amp)]
}

#[inline]
fn steering(freq_hz: f64, delay_ns: f64) -> Complex64 {
    Complex64::from_polar(1.0, -TAU * freq_hz * delay_ns * 1e-9)
}

/// Channel frequency response of one antenna pair, including per-subcarrier
/// gains and the common phase offset, before attenuation.
fn pair_response(profile: &ChannelProfile, pair: usize) -> Vec<Complex64> {
    let rot = Complex64::from_polar(1.0, profile.phase_offset_rad);
    profile
        .subcarrier_gains
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let f = k as f64 * SUBCARRIER_SPACING_HZ;
            let c: Complex64 = profile
                .taps
                .iter()
                .enumerate()
                .map(|(l, tap)| {
                    let pair_phase = Complex64::from_polar(1.0, 0.9 * (pair * (l + 1)) as f64);
                    tap.gain * pair_phase * steering(f, tap.delay_ns)
                })
                .sum();
            c * g * rot
        })
        .collect()
}

/// Synthesizes `floor(rate * total duration)` frames for `schedule` under
/// `profile`. Output is a pure function of the arguments.
pub fn generate_stream(
    schedule: &[(ActivityClass, f64)],
    profile: &ChannelProfile,
    shape: CsiShape,
    rate_hz: f64,
    seed: u64,
) -> Result<Vec<LabeledFrame>> {
    if schedule.is_empty() {
        return Err(Error::Empty("schedule"));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::invalid(format!(
            "sampling rate {rate_hz} must be > 0"
        )));
    }
    if schedule.iter().any(|&(_, d)| !(d.is_finite() && d >= 0.0)) {
        return Err(Error::invalid(
            "segment durations must be finite and non-negative",
        ));
    }
    shape.validate()?;
    profile.validate()?;
    if profile.subcarriers() != shape.n_sub {
        return Err(Error::shape(format!(
            "profile has {} subcarrier gains, shape wants {}",
            profile.subcarriers(),
            shape.n_sub
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let performances: Vec<Performance> = schedule
        .iter()
        .map(|_| Performance::draw(&mut rng))
        .collect();
    let mut bounds = Vec::with_capacity(schedule.len());
    let mut acc = 0.0;
    for &(_, d) in schedule {
        bounds.push(acc);
        acc += d;
    }
    let total_s = acc;
    let n_frames = (rate_hz * total_s + 1e-9).floor() as usize;

    let pairs = shape.pairs();
    let responses: Vec<Vec<Complex64>> = (0..pairs).map(|p| pair_response(profile, p)).collect();
    let freqs: Vec<f64> = (0..shape.n_sub)
        .map(|k| k as f64 * SUBCARRIER_SPACING_HZ)
        .collect();
    let snr_lin = 10f64.powf(profile.snr_db / 10.0);
    let noise_std: Vec<f64> = responses
        .iter()
        .map(|r| {
            let power = r.iter().map(|c| c.norm_sqr()).sum::<f64>() / r.len() as f64;
            (power / snr_lin / 2.0).sqrt()
        })
        .collect();
    let att = profile.attenuation_factor();

    let mut seg = 0;
    let mut out = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = i as f64 / rate_hz;
        while seg + 1 < schedule.len() && t >= bounds[seg + 1] {
            seg += 1;
        }
        let class = schedule[seg].0;
        let paths = body_paths(class, t - bounds[seg], &performances[seg]);
        let mut values = Vec::with_capacity(shape.len());
        for (p, response) in responses.iter().enumerate() {
            let body_scale = 1.0 - 0.1 * p as f64;
            for (k, &f) in freqs.iter().enumerate() {
                let mut s = Complex64::new(1.0, 0.0);
                for &(delay, amp) in &paths {
                    s += steering(f, delay) * (amp * body_scale);
                }
                let nre: f64 = StandardNormal.sample(&mut rng);
                let nim: f64 = StandardNormal.sample(&mut rng);
                let noise = Complex64::new(nre, nim) * noise_std[p];
                values.push((response[k] * s + noise) * att);
            }
        }
        let timestamp_ns = (i as f64 * 1e9 / rate_hz).round() as u64;
        out.push(LabeledFrame {
            frame: CsiFrame {
                timestamp_ns,
                shape,
                values,
            },
            label: class,
        });
    }
    Ok(out)
}
