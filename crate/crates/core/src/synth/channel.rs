use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{IqFrame, SynthError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay: usize,
    /// Amplitude; with Rayleigh fading on, the RMS amplitude of the tap.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Target SNR in dB; `None` means noiseless.
    pub snr_db: Option<i32>,
    pub awgn: bool,
    pub rayleigh_fading: bool,
    pub taps: Vec<Tap>,
    /// Sample-clock offsets are drawn uniformly from ±this many ppm.
    pub clock_offset_ppm: f64,
    /// Carrier offsets are drawn uniformly from ±this many cycles/sample.
    pub max_carrier_offset: f64,
}

impl ChannelConfig {
    /// Every impairment off: the channel is the identity.
    pub fn ideal() -> Self {
        Self {
            snr_db: None,
            awgn: false,
            rayleigh_fading: false,
            taps: vec![Tap { delay: 0, gain: 1.0 }],
            clock_offset_ppm: 0.0,
            max_carrier_offset: 0.0,
        }
    }

    pub fn awgn_only(snr_db: i32) -> Self {
        Self {
            snr_db: Some(snr_db),
            awgn: true,
            ..Self::ideal()
        }
    }

    /// Three Rayleigh taps at delays 0, 1, 2 with relative powers
    /// 1, 0.5, 0.25, ±50 ppm clock offset and AWGN.
    pub fn standard(snr_db: i32) -> Self {
        let powers = [1.0, 0.5, 0.25];
        let total: f64 = powers.iter().sum();
        Self {
            snr_db: Some(snr_db),
            awgn: true,
            rayleigh_fading: true,
            taps: powers
                .iter()
                .enumerate()
                .map(|(delay, p)| Tap {
                    delay,
                    gain: (p / total).sqrt(),
                })
                .collect(),
            clock_offset_ppm: 50.0,
            max_carrier_offset: 0.0,
        }
    }

    pub fn with_snr(&self, snr_db: i32) -> Self {
        Self {
            snr_db: Some(snr_db),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.taps.is_empty() {
            return Err(SynthError::InvalidConfig("channel needs at least one tap".into()));
        }
        let power: f64 = self.taps.iter().map(|t| t.gain * t.gain).sum();
        if !power.is_finite() || power > 1.0 + 1e-9 {
            return Err(SynthError::InvalidConfig(format!("total tap power {power} exceeds 1")));
        }
        if !(self.clock_offset_ppm >= 0.0 && self.clock_offset_ppm < 1e5) {
            return Err(SynthError::InvalidConfig("clock offset out of range".into()));
        }
        if !(self.max_carrier_offset >= 0.0 && self.max_carrier_offset <= 0.5) {
            return Err(SynthError::InvalidConfig("carrier offset out of range".into()));
        }
        Ok(())
    }

    fn max_delay(&self) -> usize {
        self.taps.iter().map(|t| t.delay).max().unwrap_or(0)
    }
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) / 2f64.sqrt()
}

/// Multipath, clock-offset resampling and carrier offset applied to a
/// buffer. Samples before the buffer start are taken as zero.
pub(crate) fn distort(x: &[Complex64], config: &ChannelConfig, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let gains: Vec<(usize, Complex64)> = config
        .taps
        .iter()
        .map(|t| {
            let g = if config.rayleigh_fading {
                complex_normal(rng) * t.gain
            } else {
                Complex64::new(t.gain, 0.0)
            };
            (t.delay, g)
        })
        .collect();
    let faded: Vec<Complex64> = (0..x.len())
        .map(|n| gains.iter().filter(|(d, _)| *d <= n).map(|(d, g)| g * x[n - d]).sum())
        .collect();

    let ppm = if config.clock_offset_ppm > 0.0 {
        rng.random_range(-config.clock_offset_ppm..=config.clock_offset_ppm)
    } else {
        0.0
    };
    let resampled = if ppm == 0.0 {
        faded
    } else {
        let ratio = 1.0 + ppm * 1e-6;
        let last = faded.len() - 1;
        (0..faded.len())
            .map(|n| {
                let t = (n as f64 * ratio).min(last as f64);
                let k = (t.floor() as usize).min(last);
                let frac = t - k as f64;
                if k == last {
                    faded[last]
                } else {
                    faded[k] * (1.0 - frac) + faded[k + 1] * frac
                }
            })
            .collect()
    };

    if config.max_carrier_offset > 0.0 {
        let f = rng.random_range(-config.max_carrier_offset..=config.max_carrier_offset);
        let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
        resampled
            .iter()
            .enumerate()
            .map(|(n, s)| s * Complex64::from_polar(1.0, phase0 + std::f64::consts::TAU * f * n as f64))
            .collect()
    } else {
        resampled
    }
}

/// Adds complex white Gaussian noise at `snr_db` relative to the power of
/// `x`. Returns the noise variance used.
pub(crate) fn add_noise(x: &mut [Complex64], config: &ChannelConfig, rng: &mut ChaCha8Rng) -> f64 {
    let snr = match (config.awgn, config.snr_db) {
        (true, Some(snr)) => snr,
        _ => return 0.0,
    };
    let power = x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len().max(1) as f64;
    let variance = power / 10f64.powf(snr as f64 / 10.0);
    let scale = variance.sqrt();
    for s in x.iter_mut() {
        *s += complex_normal(rng) * scale;
    }
    variance
}

/// Passes one frame through multipath, clock-offset resampling, optional
/// carrier offset and AWGN, in that order.
pub fn apply_channel(frame: &IqFrame, config: &ChannelConfig, rng: &mut ChaCha8Rng) -> Result<IqFrame, SynthError> {
    config.validate()?;
    let mut y = distort(&frame.to_complex(), config, rng);
    add_noise(&mut y, config, rng);
    Ok(IqFrame::from_complex(&y))
}

/// Leading samples the generator synthesizes ahead of each frame so that
/// multipath and resampling see a filled history.
pub(crate) fn guard(config: &ChannelConfig) -> usize {
    config.max_delay() + 8
}
