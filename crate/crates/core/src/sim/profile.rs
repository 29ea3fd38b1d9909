use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds on the profile SNR accepted after a shift.
pub const SNR_LIMITS_DB: (f64, f64) = (0.0, 60.0);

/// One multipath component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay_ns: f64,
    pub gain: Complex64,
}

/// Propagation conditions applied to every generated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub attenuation_db: f64,
    pub taps: Vec<Tap>,
    pub phase_offset_rad: f64,
    pub snr_db: f64,
    pub subcarrier_gains: Vec<f64>,
}

impl ChannelProfile {
    /// Calibrated reference environment with `subcarriers` subcarriers.
    pub fn reference(subcarriers: usize) -> Self {
        let polar = |r: f64, theta: f64| Complex64::from_polar(r, theta);
        Self {
            attenuation_db: 0.0,
            taps: vec![
                Tap {
                    delay_ns: 0.0,
                    gain: polar(1.0, 0.0),
                },
                Tap {
                    delay_ns: 45.0,
                    gain: polar(0.55, 1.1),
                },
                Tap {
                    delay_ns: 120.0,
                    gain: polar(0.30, -0.7),
                },
                Tap {
                    delay_ns: 210.0,
                    gain: polar(0.18, 2.3),
                },
            ],
            phase_offset_rad: 0.0,
            snr_db: 42.0,
            subcarrier_gains: vec![1.0; subcarriers],
        }
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarrier_gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::invalid("channel profile needs at least one tap"));
        }
        if !(self.attenuation_db >= 0.0 && self.attenuation_db.is_finite()) {
            return Err(Error::invalid(format!(
                "attenuation {} dB must be >= 0",
                self.attenuation_db
            )));
        }
        let (lo, hi) = SNR_LIMITS_DB;
        if !(lo..=hi).contains(&self.snr_db) {
            return Err(Error::invalid(format!(
                "snr {} dB outside [{lo}, {hi}]",
                self.snr_db
            )));
        }
        if self.subcarrier_gains.is_empty() {
            return Err(Error::Empty("subcarrier gains"));
        }
        if self
            .subcarrier_gains
            .iter()
            .any(|g| !(g.is_finite() && *g > 0.0))
        {
            return Err(Error::invalid(
                "subcarrier gains must be finite and positive",
            ));
        }
        for tap in &self.taps {
            if !(tap.delay_ns.is_finite() && tap.delay_ns >= 0.0)
                || !tap.gain.re.is_finite()
                || !tap.gain.im.is_finite()
            {
                return Err(Error::invalid("tap delay must be >= 0 and gains finite"));
            }
        }
        if !self.phase_offset_rad.is_finite() {
            return Err(Error::invalid("phase offset must be finite"));
        }
        Ok(())
    }

    /// Linear amplitude factor of the attenuation.
    pub fn attenuation_factor(&self) -> f64 {
        10f64.powf(-self.attenuation_db / 20.0)
    }
}

/// Controlled change of propagation conditions. The all-zero value is the
/// identity shift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub attenuation_delta_db: f64,
    /// Regenerates the multipath taps from this seed when set.
    pub tap_seed: Option<u64>,
    pub phase_offset_delta_rad: f64,
    pub snr_delta_db: f64,
    /// Std-dev of the log-normal per-subcarrier gain perturbation.
    pub gain_perturbation: f64,
    pub gain_seed: u64,
}

impl DomainShiftSpec {
    pub fn is_identity(&self) -> bool {
        self.attenuation_delta_db == 0.0
            && self.tap_seed.is_none()
            && self.phase_offset_delta_rad == 0.0
            && self.snr_delta_db == 0.0
            && self.gain_perturbation == 0.0
    }
}

/// Named shift configurations used by the experiment harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftPreset {
    None,
    Mild,
    Severe,
}

impl ShiftPreset {
    pub fn spec(self) -> DomainShiftSpec {
        match self {
            ShiftPreset::None => DomainShiftSpec::default(),
            ShiftPreset::Mild => DomainShiftSpec {
                attenuation_delta_db: 6.0,
                tap_seed: None,
                phase_offset_delta_rad: 0.6,
                snr_delta_db: -4.0,
                gain_perturbation: 0.1,
                gain_seed: 0x00A1_1CE5,
            },
            // Reoriented antennas plus new reflectors (fresh taps), an
            // uncalibrated front end (gain ripple) and a 12 dB pad.
            ShiftPreset::Severe => DomainShiftSpec {
                attenuation_delta_db: 12.0,
                tap_seed: Some(0x005E_ED0F_5E1F),
                phase_offset_delta_rad: 1.3,
                snr_delta_db: -9.0,
                gain_perturbation: 0.3,
                gain_seed: 0x0BAD_CA1B,
            },
        }
    }
}

const REGENERATED_MAX_DELAY_NS: f64 = 550.0;

fn regenerate_taps(count: usize, seed: u64) -> Vec<Tap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delays: Vec<f64> = (0..count)
        .map(|_| rng.random_range(0.0..REGENERATED_MAX_DELAY_NS))
        .collect();
    delays.sort_by(|a, b| a.partial_cmp(b).expect("finite delays"));
    let first = delays[0];
    delays
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let delay_ns = d - first;
            let mag = if i == 0 {
                1.0
            } else {
                rng.random_range(0.15..0.4)
            };
            let phase = if i == 0 {
                0.0
            } else {
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
            };
            Tap {
                delay_ns,
                gain: Complex64::from_polar(mag, phase),
            }
        })
        .collect()
}

/// Returns the profile seen after `shift`.
pub fn apply_domain_shift(
    profile: &ChannelProfile,
    shift: &DomainShiftSpec,
) -> Result<ChannelProfile> {
    profile.validate()?;
    let mut out = profile.clone();
    out.attenuation_db += shift.attenuation_delta_db;
    out.snr_db += shift.snr_delta_db;
    out.phase_offset_rad += shift.phase_offset_delta_rad;
    if let Some(seed) = shift.tap_seed {
        out.taps = regenerate_taps(profile.taps.len(), seed);
    }
    if shift.gain_perturbation != 0.0 {
        if !(shift.gain_perturbation > 0.0 && shift.gain_perturbation.is_finite()) {
            return Err(Error::invalid(
                "gain perturbation must be a finite, non-negative scale",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shift.gain_seed);
        for g in out.subcarrier_gains.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *g *= (shift.gain_perturbation * z).exp();
        }
    }
    out.validate()?;
    Ok(out)
}
