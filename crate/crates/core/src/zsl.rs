//! End-to-end zero-shot evaluation: known-class statistics from training
//! embeddings, a seeded presentation order over the mixed test set, and
//! λ1 sweeps.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::{Corpus, DatasetSplit};
use crate::discriminator::{
    fit_statistics, group_by_class, ClassStats, Discriminator, DiscriminatorConfig, DiscriminatorError, Prediction,
    RegistrySnapshot,
};
use crate::metrics::{discrimination_interval, tally, DiscriminationInterval, MetricsError, ZslReport};
use crate::net::{ModelParams, NetError, SemanticVector};
use crate::nn::SeedStream;

#[derive(Debug, thiserror::Error)]
pub enum ZslError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Discriminator(#[from] DiscriminatorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Mismatch(String),
}

/// Embedded test material for one split.
#[derive(Clone, Debug)]
pub struct ZslInputs {
    pub class_names: Vec<String>,
    pub known: usize,
    pub unknown: usize,
    pub stats: ClassStats,
    /// Known test samples followed by unknown ones.
    pub features: Vec<SemanticVector>,
    pub truth: Vec<usize>,
}

fn embed(model: &ModelParams, corpus: &Corpus) -> Result<Vec<SemanticVector>, NetError> {
    model.embed_all(&corpus.frames())
}

impl ZslInputs {
    /// Statistics from the training embeddings; test set from the known and
    /// unknown test partitions.
    pub fn prepare(model: &ModelParams, split: &DatasetSplit, shrinkage: f64) -> Result<Self, ZslError> {
        let known = split.known_classes;
        if model.config.known_classes() != known {
            return Err(ZslError::Mismatch(format!(
                "model has {} known classes, split has {known}",
                model.config.known_classes()
            )));
        }
        if model.config.class_names[..] != split.class_names()[..known] {
            return Err(ZslError::Mismatch(format!(
                "model classes {:?} differ from data classes {:?}",
                model.config.class_names,
                &split.class_names()[..known]
            )));
        }
        let train = embed(model, &split.train)?;
        let stats = fit_statistics(&group_by_class(&train, &split.train.labels(), known), shrinkage)?;
        let mut features = embed(model, &split.test_known)?;
        features.extend(embed(model, &split.test_unknown)?);
        let mut truth = split.test_known.labels();
        truth.extend(split.test_unknown.labels());
        Ok(Self {
            class_names: split.class_names().to_vec(),
            known,
            unknown: split.class_names().len() - known,
            stats,
            features,
            truth,
        })
    }
}

/// Seeded shuffle of `0..n`: the order in which test samples reach the
/// online registry.
pub fn presentation_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).child(7).rng(0));
    order
}

#[derive(Clone, Debug)]
pub struct DiscriminationRun {
    pub report: ZslReport,
    pub registry: RegistrySnapshot,
    /// Predictions in presentation order, paired with the sample index.
    pub predictions: Vec<(usize, Prediction)>,
}

/// Streams the test samples through a fresh discriminator in `order`.
pub fn run_discrimination(
    inputs: &ZslInputs,
    config: &DiscriminatorConfig,
    order: &[usize],
) -> Result<DiscriminationRun, ZslError> {
    let mut disc = Discriminator::new(inputs.stats.clone(), *config)?;
    let mut tags = vec![None; inputs.features.len()];
    let mut predictions = Vec::with_capacity(order.len());
    for &i in order {
        let p = disc.discriminate(&inputs.features[i])?;
        tags[i] = Some(p.tag);
        predictions.push((i, p));
    }
    let (tags, truth): (Vec<_>, Vec<_>) = tags
        .into_iter()
        .zip(&inputs.truth)
        .filter_map(|(t, &y)| t.map(|t| (t, y)))
        .unzip();
    let counts = tally(&tags, &truth, inputs.known, inputs.unknown)?;
    let report = ZslReport::new(
        counts,
        &inputs.class_names,
        config.lambda1,
        config.lambda2,
        config.metric,
    );
    Ok(DiscriminationRun {
        report,
        registry: disc.registry().snapshot(),
        predictions,
    })
}

/// `start, start + step, ...` up to `end` inclusive, rounded to 10
/// decimals so grid points print cleanly.
pub fn lambda_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0 && start <= end) {
        return Vec::new();
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
        .collect()
}

/// The default λ1 grid 0.05, 0.10, ..., 1.0.
pub fn default_lambda_grid() -> Vec<f64> {
    lambda_grid(0.05, 1.0, 0.05)
}

/// One independent online run per λ1, all sharing `order` and the known
/// statistics.
pub fn sweep(
    inputs: &ZslInputs,
    base: &DiscriminatorConfig,
    grid: &[f64],
    order: &[usize],
) -> Result<(Vec<ZslReport>, DiscriminationInterval), ZslError> {
    if grid.is_empty() {
        return Err(MetricsError::EmptySweep.into());
    }
    let reports = grid
        .par_iter()
        .map(|&lambda1| {
            let config = DiscriminatorConfig { lambda1, ..*base };
            run_discrimination(inputs, &config, order).map(|r| r.report)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let interval = discrimination_interval(&reports.iter().map(|r| (r.lambda1, r.wtr)).collect::<Vec<_>>())?;
    Ok((reports, interval))
}
