use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sigzsl::dataset::write_sigds;
use sigzsl::synth::*;

fn realized_snr_db(kind: ModulationType, channel: &ChannelConfig, frames: usize, seed: u64) -> f64 {
    let config = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut signal, mut noise) = (0.0, 0.0);
    for _ in 0..frames {
        let f = synthesize_frame(kind, &config, channel, &mut rng).unwrap();
        signal += f.signal.power();
        let diff = IqFrame {
            i: f.observed.i.iter().zip(&f.signal.i).map(|(a, b)| a - b).collect(),
            q: f.observed.q.iter().zip(&f.signal.q).map(|(a, b)| a - b).collect(),
        };
        noise += diff.power();
    }
    10.0 * (signal / noise).log10()
}

#[test]
fn ideal_channel_is_identity() {
    let config = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in ModulationType::ALL {
        let clean = modulate_frame(kind, &config, 11).unwrap().frame;
        assert_eq!(apply_channel(&clean, &ChannelConfig::ideal(), &mut rng).unwrap(), clean);
    }
}

#[test]
fn single_unit_tap_without_offset_passes_through() {
    let clean = modulate_frame(ModulationType::Qam16, &SynthConfig::default(), 1)
        .unwrap()
        .frame;
    let channel = ChannelConfig {
        taps: vec![Tap { delay: 0, gain: 1.0 }],
        ..ChannelConfig::ideal()
    };
    let out = apply_channel(&clean, &channel, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(out, clean);
}

#[test]
fn fixed_multipath_matches_direct_convolution() {
    let clean = modulate_frame(ModulationType::Qpsk, &SynthConfig::default(), 4)
        .unwrap()
        .frame;
    let taps = vec![Tap { delay: 0, gain: 0.8 }, Tap { delay: 2, gain: 0.5 }];
    let channel = ChannelConfig {
        taps: taps.clone(),
        ..ChannelConfig::ideal()
    };
    let out = apply_channel(&clean, &channel, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .to_complex();
    let x = clean.to_complex();
    for n in 0..x.len() {
        let mut want = x[n] * 0.8;
        if n >= 2 {
            want += x[n - 2] * 0.5;
        }
        assert!((out[n] - want).norm() < 1e-15);
    }
}

#[test]
fn excessive_tap_power_is_rejected() {
    let channel = ChannelConfig {
        taps: vec![Tap { delay: 0, gain: 1.0 }, Tap { delay: 1, gain: 0.1 }],
        ..ChannelConfig::ideal()
    };
    assert!(channel.validate().is_err());
    assert!(ChannelConfig::standard(10).validate().is_ok());
}

#[test]
fn clock_offset_is_a_small_stretch() {
    let clean = modulate_frame(ModulationType::Bfm, &SynthConfig::default(), 5)
        .unwrap()
        .frame;
    let channel = ChannelConfig {
        clock_offset_ppm: 50.0,
        ..ChannelConfig::ideal()
    };
    let out = apply_channel(&clean, &channel, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_ne!(out, clean);
    // 50 ppm over 128 samples moves the last sample by < 0.01 samples
    let diff: f64 = out
        .i
        .iter()
        .zip(&clean.i)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 0.05, "{diff}");
}

#[test]
fn awgn_hits_its_target() {
    for snr in [2, 10, 20, 40] {
        let got = realized_snr_db(ModulationType::Psk8, &ChannelConfig::awgn_only(snr), 1000, snr as u64);
        assert!((got - snr as f64).abs() < 0.5, "target {snr}, realized {got}");
    }
}

#[test]
fn standard_channel_hits_its_target_for_every_class() {
    for kind in ModulationType::ALL {
        let got = realized_snr_db(kind, &ChannelConfig::standard(16), 1000, kind.code());
        assert!((got - 16.0).abs() < 0.5, "{kind}: {got}");
    }
}

#[test]
fn linear_constellations_are_exact_without_noise() {
    let config = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in ModulationType::ALL.into_iter().filter(|k| k.is_linear()) {
        let alphabet = constellation(kind).unwrap();
        for seed in 0..20 {
            let clean = modulate_frame(kind, &config, seed).unwrap();
            let passed = apply_channel(&clean.frame, &ChannelConfig::ideal(), &mut rng).unwrap();
            for (est, sent) in estimate_symbols(&passed, &config).iter().zip(&clean.symbols) {
                let est = est / clean.gain;
                let nearest: Complex64 = *alphabet
                    .iter()
                    .min_by(|a, b| (*a - est).norm().total_cmp(&(*b - est).norm()))
                    .unwrap();
                assert!((est - nearest).norm() < 1e-3, "{kind}");
                assert_eq!(nearest, *sent);
            }
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_corpus() {
    let encode = |seed| {
        let c = generate_dataset(
            &ModulationType::ALL,
            20,
            &default_snr_grid(),
            &SynthConfig::default(),
            &ChannelConfig::standard(0),
            seed,
        )
        .unwrap();
        assert_eq!(c.len(), 220);
        let mut b = Vec::new();
        write_sigds(&c, &mut b).unwrap();
        b
    };
    assert_eq!(encode(7), encode(7));
    assert_ne!(encode(7), encode(8));
}

#[test]
fn hundred_frames_per_class_fill_the_grid() {
    let c = generate_dataset(
        &ModulationType::ALL,
        100,
        &default_snr_grid(),
        &SynthConfig::default(),
        &ChannelConfig::standard(0),
        7,
    )
    .unwrap();
    assert_eq!(c.len(), 1100);
    for class in 0..11u16 {
        for snr in default_snr_grid() {
            let n = c
                .records
                .iter()
                .filter(|r| r.class == class && r.snr_db as i32 == snr)
                .count();
            assert_eq!(n, 5);
        }
    }
}
