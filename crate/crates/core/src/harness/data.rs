use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::model::WindowSample;
use crate::numerics::RealMatrix;
use crate::sim::{
    apply_domain_shift, balanced_schedule, generate_stream, ActivityClass, ChannelProfile,
    DomainShiftSpec, FeatureExtractor, LabeledFrame, Tap,
};

/// Seed offsets that keep every stream of one run independent.
pub mod seeds {
    pub const TEST: u64 = 1000;
    pub const SHIFTED_TEST: u64 = 2000;
    pub const COLLECTION: u64 = 3000;
    pub const MONITOR: u64 = 4000;
    pub const TEACHER: u64 = 5000;

    pub fn session(seed: u64, index: usize) -> u64 {
        seed.wrapping_mul(100).wrapping_add(index as u64)
    }
}

pub fn reference_profile(cfg: &ExperimentConfig) -> ChannelProfile {
    ChannelProfile::reference(cfg.generator.shape.n_sub)
}

pub fn shifted_profile(cfg: &ExperimentConfig) -> Result<ChannelProfile> {
    apply_domain_shift(&reference_profile(cfg), &cfg.shift.spec())
}

/// Conditions of training recording `index`. Recording 0 is the reference
/// itself; the rest vary SNR, phase and gain ripple, jitter the multipath
/// taps and add one weak stray reflector.
pub fn session_profile(cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<ChannelProfile> {
    let reference = reference_profile(cfg);
    if index == 0 {
        return Ok(reference);
    }
    let g = &cfg.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::session(seed, index));
    let snr = if g.session_snr_max_db > g.session_snr_min_db {
        rng.random_range(g.session_snr_min_db..g.session_snr_max_db)
    } else {
        g.session_snr_min_db
    };
    let mut p = apply_domain_shift(
        &reference,
        &DomainShiftSpec {
            snr_delta_db: snr,
            gain_perturbation: g.session_gain_perturbation,
            gain_seed: rng.random(),
            phase_offset_delta_rad: rng.random_range(0.0..6.0),
            ..Default::default()
        },
    )?;
    let j = g.session_tap_jitter;
    for tap in p.taps.iter_mut().skip(1) {
        tap.delay_ns += j * rng.random_range(-10.0..10.0);
        tap.gain *= Complex64::from_polar(
            1.0 + j * rng.random_range(-0.15..0.15),
            j * rng.random_range(-0.3..0.3),
        );
    }
    if g.session_reflector_gain > 0.0 {
        let delay_ns = rng.random_range(0.0..500.0);
        let mag = rng.random_range(0.0..g.session_reflector_gain);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        p.taps.push(Tap {
            delay_ns,
            gain: Complex64::from_polar(mag, phase),
        });
    }
    p.validate()?;
    Ok(p)
}

/// Feature vectors of every frame.
pub fn frame_features(frames: &[LabeledFrame]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut fx = FeatureExtractor::new(first.frame.shape)?;
    frames
        .iter()
        .map(|f| fx.extract(&f.frame).map(|v| v.into_inner()))
        .collect()
}

/// Windows of `len` frames every `stride` frames, kept only when all frames
/// share one ground-truth label.
pub fn homogeneous_windows(
    frames: &[LabeledFrame],
    len: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    let feats = frame_features(frames)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= frames.len() {
        let label = frames[start + len - 1].label;
        if frames[start..start + len].iter().all(|f| f.label == label) {
            let dim = feats[start].len();
            let data: Vec<f64> = feats[start..start + len]
                .iter()
                .flatten()
                .copied()
                .collect();
            out.push(WindowSample {
                window: RealMatrix::new(len, dim, data)?,
                label: label.index(),
            });
        }
        start += stride;
    }
    Ok(out)
}

pub fn training_frames(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<LabeledFrame>>> {
    let g = &cfg.generator;
    (0..g.train_sessions)
        .map(|i| {
            let s = seeds::session(seed, i);
            let schedule = balanced_schedule(g.segment_s, g.session_rounds, s);
            generate_stream(
                &schedule,
                &session_profile(cfg, seed, i)?,
                g.shape,
                g.rate_hz,
                s,
            )
        })
        .collect()
}

pub fn training_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<WindowSample>> {
    let w = cfg.generator.window;
    let mut out = Vec::new();
    for frames in training_frames(cfg, seed)? {
        out.extend(homogeneous_windows(&frames, w, w)?);
    }
    Ok(out)
}

/// Held-out recording: the same activity schedule under either profile.
pub fn test_frames(cfg: &ExperimentConfig, seed: u64, shifted: bool) -> Result<Vec<LabeledFrame>> {
    let g = &cfg.generator;
    let schedule = balanced_schedule(g.segment_s, g.test_rounds, seed + seeds::TEST);
    let (profile, stream_seed) = if shifted {
        (shifted_profile(cfg)?, seed + seeds::SHIFTED_TEST)
    } else {
        (reference_profile(cfg), seed + seeds::TEST)
    };
    generate_stream(&schedule, &profile, g.shape, g.rate_hz, stream_seed)
}

pub fn test_set(cfg: &ExperimentConfig, seed: u64, shifted: bool) -> Result<Vec<WindowSample>> {
    let w = cfg.generator.window;
    homogeneous_windows(&test_frames(cfg, seed, shifted)?, w, w)
}

/// What the node sees while the teacher is active: one balanced pass over
/// all activities lasting the collection duration, under the shift.
pub fn collection_frames(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<LabeledFrame>> {
    let g = &cfg.generator;
    let segment = cfg.policy.collection_s / ActivityClass::COUNT as f64;
    let schedule = balanced_schedule(segment, 1, seed + seeds::COLLECTION);
    let profile = shifted_profile(cfg)?;
    generate_stream(
        &schedule,
        &profile,
        g.shape,
        g.rate_hz,
        seed + seeds::COLLECTION,
    )
}

/// Shifted stream watched by the confidence monitor.
pub fn monitor_frames(
    cfg: &ExperimentConfig,
    seed: u64,
    shifted: bool,
) -> Result<Vec<LabeledFrame>> {
    let g = &cfg.generator;
    let segment = cfg.adaptation.monitor_s / ActivityClass::COUNT as f64;
    let schedule = balanced_schedule(segment, 1, seed + seeds::MONITOR);
    let profile = if shifted {
        shifted_profile(cfg)?
    } else {
        reference_profile(cfg)
    };
    generate_stream(
        &schedule,
        &profile,
        g.shape,
        g.rate_hz,
        seed + seeds::MONITOR,
    )
}

/// Per-frame nearest-centroid accuracy in percent, centroids fitted on
/// `fit`. A model-free gauge of how separable the classes are.
pub fn nearest_centroid_accuracy(fit: &[LabeledFrame], score: &[LabeledFrame]) -> Result<f64> {
    let fit_x = frame_features(fit)?;
    let score_x = frame_features(score)?;
    let dim = fit_x.first().map_or(0, Vec::len);
    let n = ActivityClass::COUNT;
    let mut centroids = vec![vec![0.0; dim]; n];
    let mut counts = vec![0usize; n];
    for (x, f) in fit_x.iter().zip(fit) {
        let c = f.label.index();
        centroids[c].iter_mut().zip(x).for_each(|(a, b)| *a += b);
        counts[c] += 1;
    }
    for (c, k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*k).max(1) as f64);
    }
    let dist = |c: &[f64], x: &[f64]| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let correct = score_x
        .iter()
        .zip(score)
        .filter(|(x, f)| {
            let best = (0..n)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&centroids[a], x).total_cmp(&dist(&centroids[b], x)));
            best == Some(f.label.index())
        })
        .count();
    Ok(100.0 * correct as f64 / score.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_session_is_the_reference() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            session_profile(&cfg, 3, 0).unwrap(),
            reference_profile(&cfg)
        );
        let p = session_profile(&cfg, 3, 1).unwrap();
        assert_eq!(p.taps.len(), 5);
        let snr = p.snr_db - reference_profile(&cfg).snr_db;
        assert!((-7.0..6.0).contains(&snr));
        assert_eq!(p, session_profile(&cfg, 3, 1).unwrap());
        assert_ne!(p, session_profile(&cfg, 4, 1).unwrap());
    }

    #[test]
    fn windows_never_straddle_labels() {
        let cfg = ExperimentConfig::default();
        let frames = generate_stream(
            &[(ActivityClass::Walk, 2.0), (ActivityClass::Run, 2.0)],
            &reference_profile(&cfg),
            cfg.generator.shape,
            100.0,
            1,
        )
        .unwrap();
        let w = homogeneous_windows(&frames, 50, 25).unwrap();
        // 15 starts, only the one at 175 straddles the change at frame 200
        assert_eq!(w.len(), 14);
        assert_eq!(w[0].label, ActivityClass::Walk.index());
        assert_eq!(w.last().unwrap().label, ActivityClass::Run.index());
    }
}
