//! Synthetic I/Q corpus generation: eleven modulation types at 8 samples per
//! symbol, 128-sample frames, passed through multipath Rayleigh fading,
//! sample-clock offset and AWGN.

mod channel;
mod modulation;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Corpus, Record, CHANNELS};
use crate::nn::{SeedStream, Tensor};

pub use channel::{apply_channel, ChannelConfig, Tap};
pub use modulation::{constellation, estimate_symbols, rrc};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthesis configuration: {0}")]
    InvalidConfig(String),
    #[error("{frames} frames per class cannot be spread evenly over {snrs} SNR values")]
    Allocation { frames: usize, snrs: usize },
    #[error("unknown modulation type {0:?}")]
    UnknownType(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationType {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Qam64,
    Pam4,
    Gfsk,
    Cpfsk,
    Bfm,
    AmDsb,
    AmSsb,
}

impl ModulationType {
    pub const ALL: [ModulationType; 11] = [
        Self::Bpsk,
        Self::Qpsk,
        Self::Psk8,
        Self::Qam16,
        Self::Qam64,
        Self::Pam4,
        Self::Gfsk,
        Self::Cpfsk,
        Self::Bfm,
        Self::AmDsb,
        Self::AmSsb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bpsk => "BPSK",
            Self::Qpsk => "QPSK",
            Self::Psk8 => "8PSK",
            Self::Qam16 => "16QAM",
            Self::Qam64 => "64QAM",
            Self::Pam4 => "PAM4",
            Self::Gfsk => "GFSK",
            Self::Cpfsk => "CPFSK",
            Self::Bfm => "B-FM",
            Self::AmDsb => "AM-DSB",
            Self::AmSsb => "AM-SSB",
        }
    }

    /// Position in [`ModulationType::ALL`]; stable across releases.
    pub fn code(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }

    pub fn is_linear(self) -> bool {
        constellation(self).is_some()
    }

    pub fn is_analog(self) -> bool {
        matches!(self, Self::Bfm | Self::AmDsb | Self::AmSsb)
    }
}

impl fmt::Display for ModulationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationType {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = |v: &str| v.to_ascii_uppercase().replace(['-', '_'], "");
        Self::ALL
            .into_iter()
            .find(|k| norm(k.name()) == norm(s))
            .ok_or_else(|| SynthError::UnknownType(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples_per_symbol: usize,
    pub frame_len: usize,
    /// Root-raised-cosine roll-off and one-sided span in symbols.
    pub rolloff: f64,
    pub rrc_span: usize,
    pub gfsk_bt: f64,
    pub gfsk_index: f64,
    pub cpfsk_index: f64,
    /// Peak FM deviation in cycles per sample (75 kHz at 200 kHz sampling).
    pub fm_deviation: f64,
    pub am_depth: f64,
    /// Analog message: this many tones with frequencies, in cycles per
    /// sample, drawn from `[source_min_freq, source_max_freq)`.
    pub source_tones: usize,
    pub source_min_freq: f64,
    pub source_max_freq: f64,
    /// Rescale every received frame, noise included, to unit average power.
    /// Fading otherwise spreads frame power over about 20 dB.
    pub normalize_received: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples_per_symbol: 8,
            frame_len: 128,
            rolloff: 0.35,
            rrc_span: 4,
            gfsk_bt: 0.5,
            gfsk_index: 0.35,
            cpfsk_index: 0.5,
            fm_deviation: 0.375,
            am_depth: 0.8,
            source_tones: 4,
            source_min_freq: 0.002,
            source_max_freq: 0.125,
            normalize_received: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.samples_per_symbol == 0
            || self.frame_len == 0
            || !self.frame_len.is_multiple_of(self.samples_per_symbol)
        {
            return bad("frame length must be a positive multiple of samples per symbol");
        }
        if self.frame_len > u16::MAX as usize {
            return bad("frame length too large");
        }
        if !(0.0..=1.0).contains(&self.rolloff) || self.rrc_span == 0 {
            return bad("roll-off must lie in [0, 1] with a positive span");
        }
        if !(self.gfsk_bt > 0.0 && self.gfsk_index > 0.0 && self.cpfsk_index > 0.0 && self.fm_deviation > 0.0) {
            return bad("FSK and FM parameters must be positive");
        }
        if !(0.0..=1.0).contains(&self.am_depth) {
            return bad("AM depth must lie in [0, 1]");
        }
        if self.source_tones == 0
            || !(0.0 < self.source_min_freq
                && self.source_min_freq < self.source_max_freq
                && self.source_max_freq <= 0.5)
        {
            return bad("analog source needs at least one tone inside (0, 0.5)");
        }
        Ok(())
    }
}

/// Complex baseband frame held as separate I and Q rows.
#[derive(Clone, Debug, PartialEq)]
pub struct IqFrame {
    pub i: Vec<f64>,
    pub q: Vec<f64>,
}

impl IqFrame {
    pub fn from_complex(x: &[Complex64]) -> Self {
        Self {
            i: x.iter().map(|s| s.re).collect(),
            q: x.iter().map(|s| s.im).collect(),
        }
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.i
            .iter()
            .zip(&self.q)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    /// Mean of `|x[n]|²`.
    pub fn power(&self) -> f64 {
        self.i.iter().zip(&self.q).map(|(a, b)| a * a + b * b).sum::<f64>() / self.len().max(1) as f64
    }

    /// `[2, len]` tensor, I row first.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.i.iter().chain(&self.q).map(|&v| v as f32).collect();
        Tensor::from_vec(&[CHANNELS, self.len()], data).expect("two rows")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanFrame {
    pub frame: IqFrame,
    /// For linear types, the transmitted symbols peaking inside the frame.
    pub symbols: Vec<Complex64>,
    /// Scale applied to reach unit power.
    pub gain: f64,
}

fn normalize(x: &mut [Complex64], window: std::ops::Range<usize>) -> f64 {
    let w = &x[window];
    let power = w.iter().map(|s| s.norm_sqr()).sum::<f64>() / w.len() as f64;
    let gain = if power > 0.0 { power.sqrt().recip() } else { 1.0 };
    for s in x.iter_mut() {
        *s *= gain;
    }
    gain
}

/// One unit-power noiseless frame; bit-identical for equal arguments.
pub fn modulate_frame(kind: ModulationType, config: &SynthConfig, seed: u64) -> Result<CleanFrame, SynthError> {
    config.validate()?;
    let len = config.frame_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = modulation::waveform(kind, len, config, &mut rng);
    let mut x = raw.samples;
    let gain = normalize(&mut x, 0..len);
    let symbols = if kind.is_linear() {
        let layout = modulation::LinearLayout::new(len, config.samples_per_symbol, config.rrc_span);
        raw.symbols[layout.in_window(len)].to_vec()
    } else {
        Vec::new()
    };
    Ok(CleanFrame {
        frame: IqFrame::from_complex(&x),
        symbols,
        gain,
    })
}

/// A channel output together with its noiseless component.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub signal: IqFrame,
    pub observed: IqFrame,
    pub noise_variance: f64,
}

/// Synthesizes a frame with a filled channel history: the modulator runs
/// ahead of the window, the leading guard is discarded after multipath and
/// resampling, and noise is scaled to the power of what remains.
pub fn synthesize_frame(
    kind: ModulationType,
    config: &SynthConfig,
    channel: &ChannelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthFrame, SynthError> {
    config.validate()?;
    channel.validate()?;
    let len = config.frame_len;
    let lead = channel::guard(channel);
    let total = lead + len + 2;
    let mut x = modulation::waveform(kind, total, config, rng).samples;
    normalize(&mut x, lead..lead + len);
    let y = channel::distort(&x, channel, rng);
    let signal: Vec<Complex64> = y[lead..lead + len].to_vec();
    let mut observed = signal.clone();
    let mut noise_variance = channel::add_noise(&mut observed, channel, rng);
    let mut signal = signal;
    if config.normalize_received {
        let gain = normalize(&mut observed, 0..len);
        signal.iter_mut().for_each(|s| *s *= gain);
        noise_variance *= gain * gain;
    }
    Ok(SynthFrame {
        signal: IqFrame::from_complex(&signal),
        observed: IqFrame::from_complex(&observed),
        noise_variance,
    })
}

/// The even SNR grid 2, 4, ..., 40 dB.
pub fn default_snr_grid() -> Vec<i32> {
    (2..=40).step_by(2).collect()
}

/// Generates `frames_per_class` frames for each class, spread evenly over
/// `snr_values`. Records are ordered by class, then SNR. Each class draws
/// from its own seed family, so adding or removing other classes leaves its
/// frames unchanged.
pub fn generate_dataset(
    classes: &[ModulationType],
    frames_per_class: usize,
    snr_values: &[i32],
    config: &SynthConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<Corpus, SynthError> {
    config.validate()?;
    channel.validate()?;
    if classes.is_empty() {
        return Err(SynthError::InvalidConfig("no classes requested".into()));
    }
    let mut distinct = classes.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != classes.len() {
        return Err(SynthError::InvalidConfig("duplicate class".into()));
    }
    if snr_values.is_empty() || !frames_per_class.is_multiple_of(snr_values.len()) {
        return Err(SynthError::Allocation {
            frames: frames_per_class,
            snrs: snr_values.len(),
        });
    }
    if let Some(s) = snr_values.iter().find(|s| i16::try_from(**s).is_err()) {
        return Err(SynthError::InvalidConfig(format!(
            "SNR {s} dB does not fit the record format"
        )));
    }
    let per_snr = frames_per_class / snr_values.len();
    let jobs: Vec<(usize, usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..snr_values.len()).flat_map(move |s| (0..per_snr).map(move |k| (c, s, k))))
        .collect();
    let seeds = SeedStream::new(seed);
    let records = jobs
        .par_iter()
        .map(|&(c, s, k)| {
            let kind = classes[c];
            let mut rng = seeds.child(kind.code()).rng((s * per_snr + k) as u64);
            let ch = channel.with_snr(snr_values[s]);
            let frame = synthesize_frame(kind, config, &ch, &mut rng)?;
            Ok(Record {
                class: c as u16,
                snr_db: snr_values[s] as i16,
                frame: frame.observed.to_tensor(),
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Corpus {
        class_names: classes.iter().map(|k| k.name().to_string()).collect(),
        frame_len: config.frame_len,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eleven_named_types_parse_back() {
        assert_eq!(ModulationType::ALL.len(), 11);
        for k in ModulationType::ALL {
            assert_eq!(k.name().parse::<ModulationType>().unwrap(), k);
        }
        assert_eq!("bfm".parse::<ModulationType>().unwrap(), ModulationType::Bfm);
        assert_eq!("am_ssb".parse::<ModulationType>().unwrap(), ModulationType::AmSsb);
        assert!("OOK".parse::<ModulationType>().is_err());
    }

    #[test]
    fn clean_frames_have_unit_power_and_are_reproducible() {
        let config = SynthConfig::default();
        for k in ModulationType::ALL {
            for seed in 0..5 {
                let f = modulate_frame(k, &config, seed).unwrap();
                assert_eq!(f.frame.len(), 128);
                assert!((f.frame.power() - 1.0).abs() < 1e-6, "{k}: {}", f.frame.power());
                assert_eq!(f, modulate_frame(k, &config, seed).unwrap());
            }
        }
    }

    #[test]
    fn bpsk_symbols_come_back_exactly() {
        let config = SynthConfig::default();
        let f = modulate_frame(ModulationType::Bpsk, &config, 3).unwrap();
        let est = estimate_symbols(&f.frame, &config);
        assert_eq!(est.len(), 16);
        for (e, s) in est.iter().zip(&f.symbols) {
            let e = e / f.gain;
            assert!(e.im.abs() < 1e-6);
            assert!((e.re.abs() - 1.0).abs() < 1e-6);
            assert!((e - s).norm() < 1e-6);
        }
    }

    #[test]
    fn fsk_has_constant_envelope_and_cpfsk_steps_by_half_pi() {
        let config = SynthConfig::default();
        for k in [ModulationType::Gfsk, ModulationType::Cpfsk, ModulationType::Bfm] {
            let f = modulate_frame(k, &config, 9).unwrap().frame;
            for n in 0..f.len() {
                assert!((f.i[n].hypot(f.q[n]) - 1.0).abs() < 1e-12);
            }
        }
        let x = modulate_frame(ModulationType::Cpfsk, &config, 4)
            .unwrap()
            .frame
            .to_complex();
        for k in 0..15 {
            let turn = (x[8 * k + 8] / x[8 * k]).arg();
            assert!((turn.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9, "{turn}");
        }
    }

    #[test]
    fn ssb_is_analytic() {
        // an upper-sideband signal has no negative-frequency content
        let config = SynthConfig::default();
        let x = modulate_frame(ModulationType::AmSsb, &config, 2)
            .unwrap()
            .frame
            .to_complex();
        let n = x.len() as f64;
        let power_at = |f: f64| -> f64 {
            x.iter()
                .enumerate()
                .map(|(t, s)| s * Complex64::from_polar(1.0, -std::f64::consts::TAU * f * t as f64))
                .sum::<Complex64>()
                .norm_sqr()
                / n
        };
        let pos: f64 = (1..16).map(|k| power_at(k as f64 / 128.0)).sum();
        let neg: f64 = (1..16).map(|k| power_at(-(k as f64) / 128.0)).sum();
        assert!(neg < 0.2 * pos, "{neg} vs {pos}");
    }

    #[test]
    fn received_frames_are_rescaled_with_their_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let channel = ChannelConfig::standard(10);
        let raw = SynthConfig {
            normalize_received: false,
            ..SynthConfig::default()
        };
        for kind in ModulationType::ALL {
            let f = synthesize_frame(kind, &SynthConfig::default(), &channel, &mut rng).unwrap();
            assert!((f.observed.power() - 1.0).abs() < 1e-12);
        }
        // same draws without the rescale differ by one real factor
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let scaled = synthesize_frame(ModulationType::Qam16, &SynthConfig::default(), &channel, &mut a).unwrap();
        let plain = synthesize_frame(ModulationType::Qam16, &raw, &channel, &mut b).unwrap();
        let gain = plain.observed.power().sqrt().recip();
        for (s, p) in scaled.signal.i.iter().zip(&plain.signal.i) {
            assert!((s - p * gain).abs() < 1e-12);
        }
        assert!((scaled.noise_variance - plain.noise_variance * gain * gain).abs() < 1e-15);
    }

    #[test]
    fn allocation_must_divide_evenly() {
        let grid = default_snr_grid();
        assert_eq!(grid.len(), 20);
        let err = generate_dataset(
            &ModulationType::ALL,
            30,
            &grid,
            &SynthConfig::default(),
            &ChannelConfig::standard(0),
            1,
        );
        assert_eq!(err, Err(SynthError::Allocation { frames: 30, snrs: 20 }));
    }

    #[test]
    fn corpus_is_stratified_and_seeded() {
        let snrs = [2, 4];
        let kinds = [ModulationType::Qpsk, ModulationType::AmDsb];
        let make = |seed| {
            generate_dataset(
                &kinds,
                6,
                &snrs,
                &SynthConfig::default(),
                &ChannelConfig::standard(0),
                seed,
            )
            .unwrap()
        };
        let a = make(5);
        assert_eq!(a.len(), 12);
        assert_eq!(a.class_names, vec!["QPSK", "AM-DSB"]);
        for c in 0..2u16 {
            for s in snrs {
                let n = a
                    .records
                    .iter()
                    .filter(|r| r.class == c && r.snr_db == s as i16)
                    .count();
                assert_eq!(n, 3);
            }
        }
        assert_eq!(a, make(5));
        assert_ne!(a, make(6));
        // a class's frames do not depend on the other classes requested
        let alone = generate_dataset(
            &kinds[1..],
            6,
            &snrs,
            &SynthConfig::default(),
            &ChannelConfig::standard(0),
            5,
        )
        .unwrap();
        assert_eq!(alone.records[0].frame, a.records[6].frame);
    }
}
