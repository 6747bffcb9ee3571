use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sigzsl::discriminator::{fit_statistics, MetricKind};
use sigzsl::loss::LossWeights;
use sigzsl::net::{init_params, ArchConfig, ModelParams, ParamGroup, SemanticVector};
use sigzsl::nn::Tensor;
use sigzsl::train::*;

fn toy_frames(per_class: usize, seed: u64) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * per_class {
        let y = i % 2;
        let level = if y == 0 { 1.0 } else { -1.0 };
        let data: Vec<f32> = (0..256)
            .map(|j| {
                let base = if j < 128 { level } else { 0.0 };
                (base + noise.sample(&mut rng)) as f32
            })
            .collect();
        frames.push(Tensor::from_vec(&[2, 128], data).unwrap());
        labels.push(y);
    }
    (frames, labels)
}

fn toy_model(seed: u64) -> ModelParams {
    init_params(&ArchConfig::new(vec!["up".into(), "down".into()]), seed).unwrap()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 5,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    steps: Vec<(usize, usize, TrainStep)>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, epoch: usize, batch: usize, step: TrainStep) {
        self.steps.push((epoch, batch, step));
    }
}

#[test]
fn batch_steps_run_in_algorithm_order() {
    let (frames, labels) = toy_frames(16, 1);
    let data = LabeledFrames::new(frames.iter().collect(), labels);
    let mut model = toy_model(1);
    let mut opt = Optimizers::new(&model);
    let mut rec = Recorder::default();
    train_epoch(&mut model, &data, &toy_config(), &mut opt, 1, &mut rec).unwrap();
    let expected = [
        TrainStep::CenterUpdate,
        TrainStep::LossComputed,
        TrainStep::ParamUpdate(ParamGroup::Extractor),
        TrainStep::ParamUpdate(ParamGroup::Classifier),
        TrainStep::ParamUpdate(ParamGroup::Decoder),
    ];
    assert_eq!(rec.steps.len(), 2 * expected.len());
    for (b, chunk) in rec.steps.chunks(expected.len()).enumerate() {
        let got: Vec<TrainStep> = chunk.iter().map(|s| s.2).collect();
        assert_eq!(got, expected);
        assert!(chunk.iter().all(|s| s.0 == 1 && s.1 == b));
    }
}

#[test]
fn all_losses_off_leaves_parameters_unchanged() {
    let (frames, labels) = toy_frames(16, 2);
    let data = LabeledFrames::new(frames.iter().collect(), labels);
    let mut model = toy_model(2);
    let before = model.clone();
    let mut opt = Optimizers::new(&model);
    let config = TrainConfig {
        weights: LossWeights {
            ce_on: false,
            ct_on: false,
            r_on: false,
            ..LossWeights::default()
        },
        ..toy_config()
    };
    let stats = train_epoch(&mut model, &data, &config, &mut opt, 1, &mut Silent).unwrap();
    assert_eq!(stats.total, 0.0);
    assert_eq!(model, before);
}

#[test]
fn reruns_give_identical_histories_and_weights() {
    let (frames, labels) = toy_frames(24, 3);
    let (vf, vl) = toy_frames(8, 33);
    let train = LabeledFrames::new(frames.iter().collect(), labels);
    let val = LabeledFrames::new(vf.iter().collect(), vl);
    let config = TrainConfig {
        max_epochs: 3,
        ..toy_config()
    };
    let a = fit(toy_model(3), &train, &val, &config, &mut Silent).unwrap();
    let b = fit(toy_model(3), &train, &val, &config, &mut Silent).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
}

#[test]
fn toy_problem_trains() {
    let (frames, labels) = toy_frames(48, 5);
    let (vf, vl) = toy_frames(16, 55);
    let train = LabeledFrames::new(frames.iter().collect(), labels);
    let val = LabeledFrames::new(vf.iter().collect(), vl);
    let initial = toy_model(5);
    let mut model = initial.clone();
    let mut opt = Optimizers::new(&model);
    let config = toy_config();
    let mut ce = Vec::new();
    let mut r = Vec::new();
    for epoch in 1..=5 {
        let s = train_epoch(&mut model, &train, &config, &mut opt, epoch, &mut Silent).unwrap();
        ce.push(s.ce);
        r.push(s.r);
    }
    assert!(ce.windows(2).all(|w| w[1] < w[0]), "ce not strictly decreasing: {ce:?}");
    assert!(r[4] < r[0], "reconstruction did not improve: {r:?}");

    let acc = evaluate_softmax(&model, &train).unwrap();
    assert!(acc.macro_accuracy >= 0.95, "{acc:?}");
    let mean: f64 = acc.per_class.iter().flatten().sum::<f64>() / 2.0;
    assert!((acc.macro_accuracy - mean).abs() < 1e-15);

    // reconstruction error on held-out frames shrinks too
    let rec_err = |m: &ModelParams| -> f64 {
        val.frames
            .iter()
            .map(|f| {
                let (z, recs) = m.extract_features(f).unwrap();
                let x = m.decode(&z, &recs).unwrap();
                x.data()
                    .iter()
                    .zip(f.data())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
            })
            .sum()
    };
    assert!(rec_err(&model) < rec_err(&initial));

    // both classifiers agree perfectly on this easy problem
    let features = model.embed_all(&train.frames).unwrap();
    let stats = fit_statistics(
        &sigzsl::discriminator::group_by_class(&features, &train.labels, 2),
        1e-3,
    )
    .unwrap();
    let cluster = evaluate_cluster(&model, &val, &stats, MetricKind::Euclidean).unwrap();
    let softmax = evaluate_softmax(&model, &val).unwrap();
    assert_eq!(cluster.macro_accuracy, 1.0);
    assert_eq!(softmax.macro_accuracy, 1.0);
}

#[test]
fn fit_bookkeeping() {
    let (frames, labels) = toy_frames(16, 6);
    let (vf, vl) = toy_frames(8, 66);
    let train = LabeledFrames::new(frames.iter().collect(), labels);
    let val = LabeledFrames::new(vf.iter().collect(), vl);

    let zero = TrainConfig {
        max_epochs: 0,
        ..toy_config()
    };
    assert!(matches!(
        fit(toy_model(6), &train, &val, &zero, &mut Silent),
        Err(TrainError::InvalidConfig(_))
    ));
    let empty = LabeledFrames::default();
    assert!(matches!(
        fit(toy_model(6), &empty, &val, &toy_config(), &mut Silent),
        Err(TrainError::EmptyDataset(_))
    ));

    let config = TrainConfig {
        max_epochs: 4,
        patience: 2,
        ..toy_config()
    };
    let out = fit(toy_model(6), &train, &val, &config, &mut Silent).unwrap();
    assert!(!out.history.is_empty() && out.history.len() <= 4);
    let accs: Vec<f64> = out.history.iter().map(|s| s.val_softmax_acc.unwrap()).collect();
    let best = accs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(accs[out.best_epoch - 1], best);
    assert!(best >= *accs.last().unwrap());
    let recomputed = evaluate_softmax(&out.best, &val).unwrap().macro_accuracy;
    assert_eq!(recomputed, best);
}

#[test]
fn too_few_frames_for_one_batch() {
    let (frames, labels) = toy_frames(4, 7);
    let data = LabeledFrames::new(frames.iter().collect(), labels);
    let mut model = toy_model(7);
    let mut opt = Optimizers::new(&model);
    let r = train_epoch(&mut model, &data, &toy_config(), &mut opt, 1, &mut Silent);
    assert!(matches!(r, Err(TrainError::EmptyDataset(_))));
}

#[test]
fn random_labels_give_chance_accuracy() {
    let names: Vec<String> = (0..9).map(|i| format!("k{i}")).collect();
    let model: ModelParams = init_params(&ArchConfig::new(names), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames: Vec<Tensor<f32>> = (0..1800)
        .map(|_| Tensor::from_vec(&[2, 128], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let labels: Vec<usize> = (0..1800).map(|_| rng.random_range(0..9)).collect();
    let data = LabeledFrames::new(frames.iter().collect(), labels);
    let acc = evaluate_softmax(&model, &data).unwrap().macro_accuracy;
    assert!((acc - 1.0 / 9.0).abs() < 0.04, "{acc}");
}

#[test]
fn features_at_centers_cluster_perfectly() {
    let (frames, labels) = toy_frames(3, 9);
    let model = toy_model(9);
    let data = LabeledFrames::new(frames.iter().collect(), labels.clone());
    // one singleton class per frame pair: use the first frame of each class
    let feats: Vec<SemanticVector> = model.embed_all(&data.frames[..2]).unwrap();
    let stats = fit_statistics(&[vec![feats[0].clone()], vec![feats[1].clone()]], 1e-3).unwrap();
    let subset = LabeledFrames::new(data.frames[..2].to_vec(), labels[..2].to_vec());
    for metric in MetricKind::ALL {
        let r = evaluate_cluster(&model, &subset, &stats, metric).unwrap();
        assert_eq!(r.macro_accuracy, 1.0);
    }
}
