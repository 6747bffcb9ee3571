//! Batched training of extractor, classifier, decoder and centers, plus
//! softmax and nearest-center evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Corpus;
use crate::discriminator::{ClassStats, DiscriminatorError, MetricKind};
use crate::loss::{center_delta, BatchLoss, LossWeights};
use crate::net::{BatchForward, ModelParams, NetError, ParamGroup};
use crate::nn::{AdamState, NnError, SeedStream, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    EmptyDataset(String),
    #[error("label {label} outside the {classes} known classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}: ce={} ct={} r={}", .loss.ce, .loss.ct, .loss.r)]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: BatchLoss,
    },
    #[error("non-finite update in epoch {epoch}, batch {batch}: {source}")]
    NonFiniteUpdate {
        epoch: usize,
        batch: usize,
        source: NnError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Discriminator(#[from] DiscriminatorError),
    #[error("history i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Center learning rate α.
    pub center_rate: f64,
    pub weights: LossWeights,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: usize,
    /// Use `1 + n_j` instead of `n_j` in the center step.
    pub classic_center_update: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.001,
            center_rate: 0.5,
            weights: LossWeights::default(),
            max_epochs: 250,
            seed: 0,
            patience: 25,
            classic_center_update: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.center_rate >= 0.0 && self.center_rate.is_finite()) {
            return bad("center rate must be non-negative");
        }
        if self.max_epochs == 0 {
            return bad("at least one epoch is required");
        }
        Ok(())
    }
}

/// Frames with labels in `0..K`, borrowed from a corpus.
#[derive(Clone, Debug, Default)]
pub struct LabeledFrames<'a> {
    pub frames: Vec<&'a Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl<'a> LabeledFrames<'a> {
    pub fn new(frames: Vec<&'a Tensor<f32>>, labels: Vec<usize>) -> Self {
        assert_eq!(frames.len(), labels.len(), "one label per frame");
        Self { frames, labels }
    }

    pub fn from_corpus(corpus: &'a Corpus) -> Self {
        Self::new(corpus.frames(), corpus.labels())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn check_labels(&self, classes: usize) -> Result<(), TrainError> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(TrainError::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }
}

/// One Adam state per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub extractor: AdamState<f32>,
    pub classifier: AdamState<f32>,
    pub decoder: AdamState<f32>,
}

impl Optimizers {
    pub fn new(model: &ModelParams) -> Self {
        let w = &model.weights;
        Self {
            extractor: AdamState::new(w.group(ParamGroup::Extractor)),
            classifier: AdamState::new(w.group(ParamGroup::Classifier)),
            decoder: AdamState::new(w.group(ParamGroup::Decoder)),
        }
    }
}

/// The per-batch steps, in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStep {
    CenterUpdate,
    LossComputed,
    ParamUpdate(ParamGroup),
}

/// Instrumentation hooks; every method defaults to a no-op.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _batch: usize, _step: TrainStep) {}
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _loss: &BatchLoss) {}
    fn on_epoch(&mut self, _stats: &EpochStats) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub ct: f64,
    pub r: f64,
    pub total: f64,
    pub val_softmax_acc: Option<f64>,
}

/// Batch order of one epoch: a seeded permutation cut into full batches.
/// The trailing partial batch is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut SeedStream::new(seed).child(1).rng(epoch as u64));
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// One pass over the full batches of `data`. Per batch: forward, center
/// step, losses, then Adam on extractor, classifier and decoder.
pub fn train_epoch(
    model: &mut ModelParams,
    data: &LabeledFrames,
    config: &TrainConfig,
    optimizers: &mut Optimizers,
    epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<EpochStats, TrainError> {
    config.validate()?;
    data.check_labels(model.config.known_classes())?;
    let batches = epoch_batches(data.len(), config.batch_size, config.seed, epoch);
    if batches.is_empty() {
        return Err(TrainError::EmptyDataset(format!(
            "{} training frames do not fill one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    model.centers.alpha = config.center_rate;
    let mut sums = [0.0f64; 4];
    for (b, idx) in batches.iter().enumerate() {
        let frames: Vec<&Tensor<f32>> = idx.iter().map(|&i| data.frames[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let pass = BatchForward::run(model, &frames)?;

        if config.weights.ct_on {
            let delta = center_delta(&pass.features()?, &labels, &model.centers, config.classic_center_update)
                .map_err(NetError::from)?;
            model.centers.apply_delta(&delta).map_err(NetError::from)?;
        }
        observer.on_step(epoch, b, TrainStep::CenterUpdate);

        let loss = pass.loss(&frames, &labels, &model.centers, &config.weights)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: b, loss });
        }
        observer.on_step(epoch, b, TrainStep::LossComputed);
        observer.on_batch(epoch, b, &loss);

        let grads = pass.gradients(model, &frames, &labels, &model.centers, &config.weights)?;
        drop(pass);
        for (group, state) in [
            (ParamGroup::Extractor, &mut optimizers.extractor),
            (ParamGroup::Classifier, &mut optimizers.classifier),
            (ParamGroup::Decoder, &mut optimizers.decoder),
        ] {
            state
                .step(
                    &mut model.weights.group_mut(group),
                    &grads.group(group),
                    config.learning_rate,
                )
                .map_err(|source| TrainError::NonFiniteUpdate {
                    epoch,
                    batch: b,
                    source,
                })?;
            observer.on_step(epoch, b, TrainStep::ParamUpdate(group));
        }
        for (s, v) in sums.iter_mut().zip([loss.ce, loss.ct, loss.r, loss.total]) {
            *s += v;
        }
    }
    let n = batches.len() as f64;
    Ok(EpochStats {
        epoch,
        ce: sums[0] / n,
        ct: sums[1] / n,
        r: sums[2] / n,
        total: sums[3] / n,
        val_softmax_acc: None,
    })
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation accuracy (the
    /// final epoch when there is no validation set).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Trains until `max_epochs` or until validation accuracy stalls for
/// `patience` epochs.
pub fn fit(
    mut model: ModelParams,
    train: &LabeledFrames,
    validation: &LabeledFrames,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training set is empty".into()));
    }
    let classes = model.config.known_classes();
    validation.check_labels(classes)?;
    let mut optimizers = Optimizers::new(&model);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut stats = train_epoch(&mut model, train, config, &mut optimizers, epoch, observer)?;
        if !validation.is_empty() {
            let acc = evaluate_softmax(&model, validation)?.macro_accuracy;
            stats.val_softmax_acc = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {epoch}: ce {:.4} ct {:.4} r {:.4} total {:.4} val {:?}",
            stats.ce,
            stats.ct,
            stats.r,
            stats.total,
            stats.val_softmax_acc
        );
        observer.on_epoch(&stats);
        history.push(stats);
        if config.patience > 0 && stale >= config.patience {
            break;
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (history.len(), model),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        history,
    })
}

pub const HISTORY_HEADER: &str = "epoch,ce,ct,r,total,val_softmax_acc";

/// Writes the per-epoch history; a missing validation accuracy is `NA`.
pub fn write_history_csv(history: &[EpochStats], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for s in history {
        let val = s.val_softmax_acc.map_or("NA".to_string(), |v| v.to_string());
        writeln!(out, "{},{},{},{},{},{}", s.epoch, s.ce, s.ct, s.r, s.total, val)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the defined per-class entries.
    pub macro_accuracy: f64,
    pub samples: usize,
}

impl AccuracyReport {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Self {
        let mut hits = vec![0usize; classes];
        let mut totals = vec![0usize; classes];
        for (&p, &y) in predicted.iter().zip(truth) {
            totals[y] += 1;
            if p == y {
                hits[y] += 1;
            }
        }
        let per_class: Vec<Option<f64>> = hits
            .iter()
            .zip(&totals)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let macro_accuracy = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Self {
            per_class,
            macro_accuracy,
            samples: truth.len(),
        }
    }
}

/// Argmax of the classifier for each frame.
pub fn predict_softmax(model: &ModelParams, frames: &[&Tensor<f32>]) -> Result<Vec<usize>, TrainError> {
    frames
        .par_iter()
        .map(|f| {
            let (z, _) = model.extract_features(f)?;
            let probs = model.classify(&z)?;
            Ok(argmax(&probs))
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_softmax(model: &ModelParams, data: &LabeledFrames) -> Result<AccuracyReport, TrainError> {
    let classes = model.config.known_classes();
    data.check_labels(classes)?;
    let predicted = predict_softmax(model, &data.frames)?;
    Ok(AccuracyReport::from_predictions(&predicted, &data.labels, classes))
}

/// Nearest-center accuracy with no rejection step.
pub fn evaluate_cluster(
    model: &ModelParams,
    data: &LabeledFrames,
    stats: &ClassStats,
    metric: MetricKind,
) -> Result<AccuracyReport, TrainError> {
    let classes = model.config.known_classes();
    data.check_labels(classes)?;
    if stats.classes.len() != classes {
        return Err(TrainError::InvalidConfig(format!(
            "statistics cover {} classes, model has {classes}",
            stats.classes.len()
        )));
    }
    let features = model.embed_all(&data.frames)?;
    let predicted = features
        .par_iter()
        .map(|z| stats.nearest(z.as_slice(), metric).map(|(k, _)| k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AccuracyReport::from_predictions(&predicted, &data.labels, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(TrainConfig::default().validate().is_ok());
        for broken in [
            TrainConfig {
                max_epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(broken.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn batches_drop_the_remainder_and_follow_the_seed() {
        let a = epoch_batches(10, 4, 3, 1);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|b| b.len() == 4));
        assert_eq!(a, epoch_batches(10, 4, 3, 1));
        assert_ne!(a, epoch_batches(10, 4, 3, 2));
    }

    #[test]
    fn macro_accuracy_is_mean_of_classes() {
        let r = AccuracyReport::from_predictions(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2], 4);
        assert_eq!(r.per_class, vec![Some(1.0), Some(2.0 / 3.0), Some(1.0), None]);
        assert!((r.macro_accuracy - (1.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let r = AccuracyReport::from_predictions(&[0, 1, 2], &[0, 1, 2], 3);
        assert!(r.per_class.iter().all(|&a| a == Some(1.0)));
        assert_eq!(r.macro_accuracy, 1.0);
    }

    #[test]
    fn history_csv_layout() {
        let h = [
            EpochStats {
                epoch: 1,
                ce: 1.5,
                ct: 0.25,
                r: 0.5,
                total: 2.025,
                val_softmax_acc: None,
            },
            EpochStats {
                epoch: 2,
                ce: 1.0,
                ct: 0.125,
                r: 0.25,
                total: 1.2625,
                val_softmax_acc: Some(0.75),
            },
        ];
        let mut buf = Vec::new();
        write_history_csv(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines[1], "1,1.5,0.25,0.5,2.025,NA");
        assert_eq!(lines[2], "2,1,0.125,0.25,1.2625,0.75");
    }
}
