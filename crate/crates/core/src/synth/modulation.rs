use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{IqFrame, ModulationType, SynthConfig};

/// Unit-average-power symbol alphabet of a linearly modulated type.
pub fn constellation(kind: ModulationType) -> Option<Vec<Complex64>> {
    use ModulationType::*;
    let psk = |m: usize, offset: f64| -> Vec<Complex64> {
        (0..m)
            .map(|k| Complex64::from_polar(1.0, offset + 2.0 * PI * k as f64 / m as f64))
            .collect()
    };
    let qam = |side: usize| -> Vec<Complex64> {
        let levels: Vec<f64> = (0..side).map(|k| (2 * k) as f64 - (side - 1) as f64).collect();
        let power = 2.0 * levels.iter().map(|l| l * l).sum::<f64>() / side as f64;
        let scale = power.sqrt();
        levels
            .iter()
            .flat_map(|&i| levels.iter().map(move |&q| Complex64::new(i / scale, q / scale)))
            .collect()
    };
    Some(match kind {
        Bpsk => psk(2, 0.0),
        Qpsk => psk(4, PI / 4.0),
        Psk8 => psk(8, 0.0),
        Qam16 => qam(4),
        Qam64 => qam(8),
        Pam4 => [-3.0, -1.0, 1.0, 3.0]
            .iter()
            .map(|v| Complex64::new(v / 5f64.sqrt(), 0.0))
            .collect(),
        _ => return None,
    })
}

/// Root-raised-cosine impulse response at `t` samples, unit energy per
/// symbol period `sps`.
pub fn rrc(t: f64, sps: usize, beta: f64) -> f64 {
    let ts = sps as f64;
    let x = t / ts;
    if x.abs() < 1e-12 {
        return (1.0 + beta * (4.0 / PI - 1.0)) / ts.sqrt();
    }
    if beta > 0.0 && ((4.0 * beta * x).abs() - 1.0).abs() < 1e-9 {
        let a = (1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin();
        let b = (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos();
        return beta / (2f64.sqrt() * ts.sqrt()) * (a + b);
    }
    let num = (PI * x * (1.0 - beta)).sin() + 4.0 * beta * x * (PI * x * (1.0 + beta)).cos();
    let den = PI * x * (1.0 - (4.0 * beta * x).powi(2));
    num / den / ts.sqrt()
}

/// Symbol timing for a linearly modulated stream of `len` samples: symbol
/// `m` peaks at sample `(m - span) * sps`, so the first `span` symbols lead
/// in from before the window and the last `span` trail out of it.
pub(crate) struct LinearLayout {
    pub sps: usize,
    pub span: usize,
    pub count: usize,
}

impl LinearLayout {
    pub fn new(len: usize, sps: usize, span: usize) -> Self {
        Self {
            sps,
            span,
            count: len.div_ceil(sps) + 2 * span,
        }
    }

    pub fn center(&self, m: usize) -> i64 {
        (m as i64 - self.span as i64) * self.sps as i64
    }

    /// Indices of the symbols whose peak lies inside `[0, len)`.
    pub fn in_window(&self, len: usize) -> std::ops::Range<usize> {
        self.span..self.span + len.div_ceil(self.sps)
    }

    pub fn pulse_matrix(&self, len: usize, beta: f64) -> DMatrix<f64> {
        let reach = (self.span * self.sps) as i64;
        DMatrix::from_fn(len, self.count, |n, m| {
            let dt = n as i64 - self.center(m);
            if dt.abs() <= reach {
                rrc(dt as f64, self.sps, beta)
            } else {
                0.0
            }
        })
    }
}

/// Unnormalized baseband samples plus, for linear types, every symbol that
/// touches the window.
pub(crate) struct RawWaveform {
    pub samples: Vec<Complex64>,
    pub symbols: Vec<Complex64>,
}

pub(crate) fn waveform(kind: ModulationType, len: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> RawWaveform {
    use ModulationType::*;
    match kind {
        Gfsk => fsk(len, config, config.gfsk_index, Some(config.gfsk_bt), rng),
        Cpfsk => fsk(len, config, config.cpfsk_index, None, rng),
        Bfm | AmDsb | AmSsb => analog(kind, len, config, rng),
        _ => linear(kind, len, config, rng),
    }
}

fn linear(kind: ModulationType, len: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> RawWaveform {
    let alphabet = constellation(kind).expect("linear type");
    let layout = LinearLayout::new(len, config.samples_per_symbol, config.rrc_span);
    let symbols: Vec<Complex64> = (0..layout.count)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect();
    let reach = (layout.span * layout.sps) as i64;
    let samples = (0..len)
        .map(|n| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, s) in symbols.iter().enumerate() {
                let dt = n as i64 - layout.center(m);
                if dt.abs() <= reach {
                    acc += s * rrc(dt as f64, layout.sps, config.rolloff);
                }
            }
            acc
        })
        .collect();
    RawWaveform { samples, symbols }
}

/// Sampled Gaussian frequency-smoothing kernel for bandwidth-time `bt`,
/// three symbols wide, unit sum.
fn gaussian_kernel(sps: usize, bt: f64) -> Vec<f64> {
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt) * sps as f64;
    let half = (3 * sps) as i64 / 2;
    let raw: Vec<f64> = (-half..=half)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn fsk(len: usize, config: &SynthConfig, index: f64, bt: Option<f64>, rng: &mut ChaCha8Rng) -> RawWaveform {
    let sps = config.samples_per_symbol;
    let kernel = bt.map(|bt| gaussian_kernel(sps, bt));
    let pad = kernel.as_ref().map_or(0, |k| k.len() / 2);
    let nsym = (len + 2 * pad).div_ceil(sps);
    let bits: Vec<f64> = (0..nsym)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let nrz: Vec<f64> = (0..len + 2 * pad).map(|n| bits[n / sps]).collect();
    let freq: Vec<f64> = match &kernel {
        None => nrz,
        Some(k) => (pad..pad + len)
            .map(|n| k.iter().enumerate().map(|(j, w)| w * nrz[n + j - pad]).sum())
            .collect(),
    };
    // a full symbol of constant frequency advances the phase by pi * index
    let step = PI * index / sps as f64;
    let mut phase = rng.random_range(0.0..2.0 * PI);
    let samples = freq
        .iter()
        .map(|f| {
            let s = Complex64::from_polar(1.0, phase);
            phase += step * f;
            s
        })
        .collect();
    RawWaveform {
        samples,
        symbols: bits.into_iter().map(|b| Complex64::new(b, 0.0)).collect(),
    }
}

/// Seeded audio-like message in [-1, 1] and its exact Hilbert transform.
fn message(len: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let tones: Vec<(f64, f64, f64)> = (0..config.source_tones)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(config.source_min_freq..config.source_max_freq),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let norm: f64 = tones.iter().map(|t| t.0).sum();
    let at = |n: usize, quad: bool| -> f64 {
        tones
            .iter()
            .map(|&(a, f, p)| {
                let arg = 2.0 * PI * f * n as f64 + p;
                a * if quad { arg.sin() } else { arg.cos() }
            })
            .sum::<f64>()
            / norm
    };
    (
        (0..len).map(|n| at(n, false)).collect(),
        (0..len).map(|n| at(n, true)).collect(),
    )
}

fn analog(kind: ModulationType, len: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> RawWaveform {
    let (m, mh) = message(len, config, rng);
    let samples = match kind {
        ModulationType::AmDsb => m
            .iter()
            .map(|v| Complex64::new(1.0 + config.am_depth * v, 0.0))
            .collect(),
        ModulationType::AmSsb => m.iter().zip(&mh).map(|(&i, &q)| Complex64::new(i, q)).collect(),
        _ => {
            let mut phase = rng.random_range(0.0..2.0 * PI);
            m.iter()
                .map(|v| {
                    let s = Complex64::from_polar(1.0, phase);
                    phase += 2.0 * PI * config.fm_deviation * v;
                    s
                })
                .collect()
        }
    };
    RawWaveform {
        samples,
        symbols: Vec::new(),
    }
}

/// Least-squares (decorrelating matched filter) estimates of the symbols
/// whose peaks fall inside the frame, for a linearly modulated frame.
pub fn estimate_symbols(frame: &IqFrame, config: &SynthConfig) -> Vec<Complex64> {
    let len = frame.len();
    let layout = LinearLayout::new(len, config.samples_per_symbol, config.rrc_span);
    let a = layout.pulse_matrix(len, config.rolloff);
    let svd = a.svd(true, true);
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let b = nalgebra::DVector::from_column_slice(rhs);
        svd.solve(&b, 1e-10)
            .expect("svd has both factors")
            .iter()
            .copied()
            .collect()
    };
    let si = solve(&frame.i);
    let sq = solve(&frame.q);
    layout.in_window(len).map(|m| Complex64::new(si[m], sq[m])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabets_have_unit_power() {
        for kind in ModulationType::ALL {
            if let Some(c) = constellation(kind) {
                let p = c.iter().map(|s| s.norm_sqr()).sum::<f64>() / c.len() as f64;
                assert!((p - 1.0).abs() < 1e-12, "{kind}");
            }
        }
        assert_eq!(constellation(ModulationType::Qam64).unwrap().len(), 64);
        assert!(constellation(ModulationType::Gfsk).is_none());
    }

    #[test]
    fn rrc_has_unit_energy_and_nyquist_autocorrelation() {
        let (sps, beta) = (8usize, 0.35);
        // long support so truncation is negligible
        let taps: Vec<f64> = (-400..=400).map(|t| rrc(t as f64, sps, beta)).collect();
        let energy: f64 = taps.iter().map(|v| v * v).sum();
        assert!((energy - 1.0).abs() < 1e-3, "{energy}");
        for lag in 1..4 {
            let shift = lag * sps;
            let r: f64 = taps[..taps.len() - shift]
                .iter()
                .zip(&taps[shift..])
                .map(|(a, b)| a * b)
                .sum();
            assert!(r.abs() < 2e-3, "lag {lag}: {r}");
        }
        // the removable singularity is continuous
        let t0 = sps as f64 / (4.0 * beta);
        assert!((rrc(t0, sps, beta) - rrc(t0 + 1e-6, sps, beta)).abs() < 1e-6);
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k = gaussian_kernel(8, 0.5);
        assert_eq!(k.len(), 25);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
