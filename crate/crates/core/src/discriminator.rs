//! Two-step known/unknown discrimination in the semantic space.
//!
//! Step one measures the distance `d1` from `z` to the nearest known-class
//! center and accepts the class when `d1 < Θ1 = λ1·3√t`. Otherwise `z` is
//! unknown: it either joins the nearest recorded unknown label (when that
//! distance `d2 ≤ Θ2 = (Θ1 + λ2·d1)/(1 + λ2)`) or founds a new one. Unknown
//! centers are running means of their members.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::SemanticVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscriminatorError {
    #[error("class {0} has no features")]
    EmptyClass(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("metric matrix of class {0} is not positive definite; enable shrinkage")]
    NotPositiveDefinite(usize),
    #[error("unknown label {0} is not in the registry")]
    UnknownLabel(usize),
    #[error("invalid discriminator config: {0}")]
    InvalidConfig(String),
}

/// Which matrix `A` enters `√(vᵀA⁻¹v)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `A = Σ`
    #[default]
    Mahalanobis,
    /// `A = E`
    Euclidean,
    /// `A = Λ`, the diagonal of `Σ`
    Diagonal,
    /// `A = σ²E` with `σ² = trace(Σ)/t`
    ScaledIdentity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Mahalanobis,
        MetricKind::Euclidean,
        MetricKind::Diagonal,
        MetricKind::ScaledIdentity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mahalanobis => "mahalanobis",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Diagonal => "diagonal",
            MetricKind::ScaledIdentity => "scaled_identity",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            format!("unknown metric {s:?}; expected one of mahalanobis, euclidean, diagonal, scaled_identity")
        })
    }
}

pub const DEFAULT_SHRINKAGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub metric: MetricKind,
    /// Also refresh known centers with accepted samples.
    pub update_known: bool,
    /// Relative covariance shrinkage `ε`.
    pub shrinkage: f64,
    /// Fit covariances for unknown labels once they have `t + 1` members.
    /// Off: unknown labels always use the identity metric.
    pub unknown_covariance: bool,
}

impl DiscriminatorConfig {
    pub fn new(lambda1: f64) -> Self {
        Self {
            lambda1,
            lambda2: 1.0,
            metric: MetricKind::Mahalanobis,
            update_known: false,
            shrinkage: DEFAULT_SHRINKAGE,
            unknown_covariance: false,
        }
    }

    pub fn validate(&self) -> Result<(), DiscriminatorError> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(DiscriminatorError::InvalidConfig(format!(
                "lambda1 must be > 0, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(DiscriminatorError::InvalidConfig(format!(
                "lambda2 must be >= 0, got {}",
                self.lambda2
            )));
        }
        if !(self.shrinkage >= 0.0 && self.shrinkage.is_finite()) {
            return Err(DiscriminatorError::InvalidConfig(format!(
                "shrinkage must be >= 0, got {}",
                self.shrinkage
            )));
        }
        Ok(())
    }
}

pub fn theta1(lambda1: f64, dim: usize) -> f64 {
    lambda1 * 3.0 * (dim as f64).sqrt()
}

pub fn theta2(theta1: f64, lambda2: f64, d1: f64) -> f64 {
    (theta1 + lambda2 * d1) / (1.0 + lambda2)
}

/// Center and metric matrices of one class.
#[derive(Clone, Debug)]
pub struct ClassModel {
    pub center: Vec<f64>,
    /// Sample covariance before shrinkage; identity for singletons and
    /// zero-spread classes.
    pub covariance: DMatrix<f64>,
    pub count: usize,
    /// Diagonal of the shrunk covariance.
    pub diagonal: Vec<f64>,
    /// `trace(Σ)/t` of the unshrunk covariance.
    pub sigma2: f64,
    /// Lower Cholesky factor of the shrunk covariance, if it exists.
    cholesky: Option<DMatrix<f64>>,
}

impl ClassModel {
    /// Builds a class from its first two moments. The stored matrices are
    /// `Σ + ε·(trace(Σ)/t)·E`.
    pub fn from_moments(center: Vec<f64>, covariance: DMatrix<f64>, count: usize, shrinkage: f64) -> Self {
        let t = center.len();
        let mean_eig = covariance.trace() / t as f64;
        let mut shrunk = covariance.clone();
        for i in 0..t {
            shrunk[(i, i)] += shrinkage * mean_eig;
        }
        let diagonal = (0..t).map(|i| shrunk[(i, i)]).collect();
        let cholesky = shrunk.cholesky().map(|c| c.l());
        Self {
            center,
            covariance,
            count,
            diagonal,
            sigma2: mean_eig,
            cholesky,
        }
    }

    /// Mean and unbiased covariance of `members`. One member, or members
    /// without any spread, fall back to the identity.
    pub fn fit(members: &[&[f64]], shrinkage: f64) -> Option<Self> {
        let first = members.first()?;
        let t = first.len();
        let m = members.len();
        let mut center = vec![0.0; t];
        for z in members {
            for (c, &v) in center.iter_mut().zip(z.iter()) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= m as f64);
        let mut cov = DMatrix::<f64>::zeros(t, t);
        if m > 1 {
            let mut centered = DMatrix::<f64>::zeros(t, m);
            for (j, z) in members.iter().enumerate() {
                for i in 0..t {
                    centered[(i, j)] = z[i] - center[i];
                }
            }
            cov = &centered * centered.transpose() / (m - 1) as f64;
        }
        if m == 1 || cov.trace() <= 0.0 {
            cov = DMatrix::identity(t, t);
        }
        Some(Self::from_moments(center, cov, m, shrinkage))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `√(vᵀA⁻¹v)` with `v = z − center`.
    pub fn distance(&self, z: &[f64], metric: MetricKind) -> Option<f64> {
        let v = z.iter().zip(&self.center).map(|(a, b)| a - b);
        let d2 = match metric {
            MetricKind::Euclidean => v.map(|x| x * x).sum(),
            MetricKind::ScaledIdentity => v.map(|x| x * x).sum::<f64>() / self.sigma2,
            MetricKind::Diagonal => v.zip(&self.diagonal).map(|(x, &l)| x * x / l).sum(),
            MetricKind::Mahalanobis => {
                let l = self.cholesky.as_ref()?;
                let y = l.solve_lower_triangular(&DVector::from_iterator(self.dim(), v))?;
                y.norm_squared()
            }
        };
        d2.is_finite().then(|| d2.max(0.0).sqrt())
    }

    fn usable(&self, metric: MetricKind) -> bool {
        match metric {
            MetricKind::Euclidean => true,
            MetricKind::ScaledIdentity => self.sigma2 > 0.0,
            MetricKind::Diagonal => self.diagonal.iter().all(|&l| l > 0.0),
            MetricKind::Mahalanobis => self.cholesky.is_some(),
        }
    }
}

/// Per-known-class centers and covariances fitted on training features.
#[derive(Clone, Debug)]
pub struct ClassStats {
    pub classes: Vec<ClassModel>,
}

/// Fits one [`ClassModel`] per known class; `features_by_class[k]` holds the
/// training features of class `k`.
pub fn fit_statistics(
    features_by_class: &[Vec<SemanticVector>],
    shrinkage: f64,
) -> Result<ClassStats, DiscriminatorError> {
    let dim = features_by_class.iter().flatten().next().map(|z| z.dim()).unwrap_or(0);
    let mut classes = Vec::with_capacity(features_by_class.len());
    for (k, feats) in features_by_class.iter().enumerate() {
        if let Some(bad) = feats.iter().find(|z| z.dim() != dim) {
            return Err(DiscriminatorError::Dimension {
                expected: dim,
                got: bad.dim(),
            });
        }
        let members: Vec<&[f64]> = feats.iter().map(|z| z.as_slice()).collect();
        classes.push(ClassModel::fit(&members, shrinkage).ok_or(DiscriminatorError::EmptyClass(k))?);
    }
    Ok(ClassStats { classes })
}

/// Groups features by label, `classes` groups in total.
pub fn group_by_class(features: &[SemanticVector], labels: &[usize], classes: usize) -> Vec<Vec<SemanticVector>> {
    let mut groups = vec![Vec::new(); classes];
    for (z, &y) in features.iter().zip(labels) {
        groups[y].push(z.clone());
    }
    groups
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.classes.first().map(|c| c.dim()).unwrap_or(0)
    }

    pub fn check(&self, metric: MetricKind) -> Result<(), DiscriminatorError> {
        match self.classes.iter().position(|c| !c.usable(metric)) {
            Some(k) => Err(DiscriminatorError::NotPositiveDefinite(k)),
            None => Ok(()),
        }
    }

    /// Nearest known class and its distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64], metric: MetricKind) -> Result<(usize, f64), DiscriminatorError> {
        if z.len() != self.dim() {
            return Err(DiscriminatorError::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        argmin(self.classes.iter().enumerate().map(|(k, c)| {
            c.distance(z, metric)
                .map(|d| (k, d))
                .ok_or(DiscriminatorError::NotPositiveDefinite(k))
        }))
        .map(|best| best.expect("at least one class"))
    }
}

fn argmin<E>(items: impl Iterator<Item = Result<(usize, f64), E>>) -> Result<Option<(usize, f64)>, E> {
    let mut best: Option<(usize, f64)> = None;
    for item in items {
        let (i, d) = item?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    Ok(best)
}

/// A discovered unknown label and its members.
#[derive(Clone, Debug)]
pub struct UnknownClass {
    members: Vec<Vec<f64>>,
    sum: Vec<f64>,
    center: Vec<f64>,
    fitted: Option<ClassModel>,
}

impl UnknownClass {
    fn new(z: &[f64]) -> Self {
        Self {
            members: vec![z.to_vec()],
            sum: z.to_vec(),
            center: z.to_vec(),
            fitted: None,
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    fn add(&mut self, z: &[f64]) {
        self.members.push(z.to_vec());
        let n = self.members.len() as f64;
        for ((s, c), &v) in self.sum.iter_mut().zip(self.center.iter_mut()).zip(z) {
            *s += v;
            *c = *s / n;
        }
        self.fitted = None;
    }
}

/// Unknown labels in discovery order. Label `u` is displayed as `R{u+1}`.
#[derive(Clone, Debug, Default)]
pub struct UnknownRegistry {
    labels: Vec<UnknownClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub label: String,
    pub members: usize,
    pub center: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub labels: Vec<RegistryEntry>,
}

pub fn unknown_label_name(u: usize) -> String {
    format!("R{}", u + 1)
}

impl UnknownRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: usize) -> Option<&UnknownClass> {
        self.labels.get(label)
    }

    /// Founds a new label with `z` as its only member.
    pub fn create(&mut self, z: &[f64]) -> usize {
        self.labels.push(UnknownClass::new(z));
        self.labels.len() - 1
    }

    /// Adds `z` to `label` and refreshes its center as the member mean.
    pub fn update(&mut self, label: usize, z: &[f64]) -> Result<(), DiscriminatorError> {
        let class = self
            .labels
            .get_mut(label)
            .ok_or(DiscriminatorError::UnknownLabel(label))?;
        if z.len() != class.center.len() {
            return Err(DiscriminatorError::Dimension {
                expected: class.center.len(),
                got: z.len(),
            });
        }
        class.add(z);
        Ok(())
    }

    /// Metric model of an unknown label: the identity around its center
    /// unless covariances are enabled and it has at least `t + 1` members.
    pub fn metric_model(
        &mut self,
        label: usize,
        config: &DiscriminatorConfig,
    ) -> Result<ClassModel, DiscriminatorError> {
        let class = self
            .labels
            .get_mut(label)
            .ok_or(DiscriminatorError::UnknownLabel(label))?;
        Ok(unknown_model(class, config))
    }

    fn distance(&mut self, label: usize, z: &[f64], config: &DiscriminatorConfig) -> Result<f64, DiscriminatorError> {
        let class = &mut self.labels[label];
        let t = class.center.len();
        if config.unknown_covariance && class.members.len() > t {
            if class.fitted.is_none() {
                class.fitted = Some(unknown_model(class, config));
            }
            let model = class.fitted.as_ref().expect("just fitted");
            return model
                .distance(z, config.metric)
                .ok_or(DiscriminatorError::NotPositiveDefinite(label));
        }
        Ok(euclidean(z, &class.center))
    }

    /// Read-only nearest label for frozen evaluation. Covariances fitted
    /// before freezing are reused; others fall back to the identity.
    fn nearest_frozen(&self, z: &[f64], config: &DiscriminatorConfig) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (u, class) in self.labels.iter().enumerate() {
            let d = match (&class.fitted, config.unknown_covariance) {
                (Some(m), true) => m.distance(z, config.metric).unwrap_or(f64::INFINITY),
                _ => euclidean(z, &class.center),
            };
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((u, d));
            }
        }
        best
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot {
            labels: self
                .labels
                .iter()
                .enumerate()
                .map(|(u, c)| RegistryEntry {
                    label: unknown_label_name(u),
                    members: c.members.len(),
                    center: c.center.clone(),
                })
                .collect(),
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn unknown_model(class: &UnknownClass, config: &DiscriminatorConfig) -> ClassModel {
    let t = class.center.len();
    if config.unknown_covariance && class.members.len() > t {
        let members: Vec<&[f64]> = class.members.iter().map(|m| m.as_slice()).collect();
        let mut model = ClassModel::fit(&members, config.shrinkage).expect("non-empty");
        model.center = class.center.clone();
        model
    } else {
        ClassModel::from_moments(class.center.clone(), DMatrix::identity(t, t), class.members.len(), 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    Known(usize),
    Unknown(usize),
    /// Frozen mode only: the sample would have founded a new label.
    Novel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tag: Tag,
    pub d1: f64,
    pub d2: Option<f64>,
    pub theta1: f64,
    pub theta2: Option<f64>,
}

impl Prediction {
    pub fn is_known(&self) -> bool {
        matches!(self.tag, Tag::Known(_))
    }
}

/// Known-class statistics plus this session's unknown registry.
#[derive(Clone, Debug)]
pub struct Discriminator {
    stats: ClassStats,
    config: DiscriminatorConfig,
    registry: UnknownRegistry,
}

impl Discriminator {
    pub fn new(stats: ClassStats, config: DiscriminatorConfig) -> Result<Self, DiscriminatorError> {
        config.validate()?;
        stats.check(config.metric)?;
        Ok(Self {
            stats,
            config,
            registry: UnknownRegistry::new(),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn stats(&self) -> &ClassStats {
        &self.stats
    }

    pub fn registry(&self) -> &UnknownRegistry {
        &self.registry
    }

    pub fn theta1(&self) -> f64 {
        theta1(self.config.lambda1, self.stats.dim())
    }

    /// Online decision; unknown outcomes update the registry.
    pub fn discriminate(&mut self, z: &SemanticVector) -> Result<Prediction, DiscriminatorError> {
        let z = z.as_slice();
        let (k, d1) = self.stats.nearest(z, self.config.metric)?;
        let th1 = self.theta1();
        if d1 < th1 {
            if self.config.update_known {
                let class = &mut self.stats.classes[k];
                class.count += 1;
                let n = class.count as f64;
                for (c, &v) in class.center.iter_mut().zip(z) {
                    *c += (v - *c) / n;
                }
            }
            return Ok(Prediction {
                tag: Tag::Known(k),
                d1,
                d2: None,
                theta1: th1,
                theta2: None,
            });
        }
        if self.registry.is_empty() {
            let u = self.registry.create(z);
            return Ok(Prediction {
                tag: Tag::Unknown(u),
                d1,
                d2: None,
                theta1: th1,
                theta2: None,
            });
        }
        let th2 = theta2(th1, self.config.lambda2, d1);
        let mut best: Option<(usize, f64)> = None;
        for u in 0..self.registry.len() {
            let d = self.registry.distance(u, z, &self.config)?;
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((u, d));
            }
        }
        let (u, d2) = best.expect("registry not empty");
        let label = if d2 > th2 {
            self.registry.create(z)
        } else {
            self.registry.update(u, z)?;
            u
        };
        Ok(Prediction {
            tag: Tag::Unknown(label),
            d1,
            d2: Some(d2),
            theta1: th1,
            theta2: Some(th2),
        })
    }

    /// Same branches as [`Self::discriminate`] against the current state,
    /// without mutating anything. Safe to call from many threads.
    pub fn discriminate_frozen(&self, z: &SemanticVector) -> Result<Prediction, DiscriminatorError> {
        let z = z.as_slice();
        let (k, d1) = self.stats.nearest(z, self.config.metric)?;
        let th1 = self.theta1();
        if d1 < th1 {
            return Ok(Prediction {
                tag: Tag::Known(k),
                d1,
                d2: None,
                theta1: th1,
                theta2: None,
            });
        }
        let Some((u, d2)) = self.registry.nearest_frozen(z, &self.config) else {
            return Ok(Prediction {
                tag: Tag::Novel,
                d1,
                d2: None,
                theta1: th1,
                theta2: None,
            });
        };
        let th2 = theta2(th1, self.config.lambda2, d1);
        Ok(Prediction {
            tag: if d2 > th2 { Tag::Novel } else { Tag::Unknown(u) },
            d1,
            d2: Some(d2),
            theta1: th1,
            theta2: Some(th2),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(v: &[f64]) -> SemanticVector {
        SemanticVector::new(v.to_vec())
    }

    fn model(center: &[f64], cov: &[f64]) -> ClassModel {
        let t = center.len();
        ClassModel::from_moments(center.to_vec(), DMatrix::from_row_slice(t, t, cov), 10, 0.0)
    }

    #[test]
    fn class_mean_of_two_points() {
        let stats = fit_statistics(&[vec![sv(&[0.0, 0.0]), sv(&[2.0, 2.0])]], 0.0).unwrap();
        assert_eq!(stats.classes[0].center, vec![1.0, 1.0]);
    }

    #[test]
    fn singleton_class_uses_identity() {
        let stats = fit_statistics(&[vec![sv(&[3.0, -1.0])]], DEFAULT_SHRINKAGE).unwrap();
        assert_eq!(stats.classes[0].covariance, DMatrix::identity(2, 2));
    }

    #[test]
    fn sigma2_is_mean_variance() {
        assert_eq!(model(&[0.0, 0.0], &[2.0, 0.0, 0.0, 4.0]).sigma2, 3.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        assert_eq!(
            fit_statistics(&[vec![sv(&[1.0])], vec![]], 0.0).unwrap_err(),
            DiscriminatorError::EmptyClass(1)
        );
    }

    #[test]
    fn euclidean_and_diagonal_examples() {
        let m = model(&[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]);
        assert_eq!(m.distance(&[3.0, 4.0], MetricKind::Euclidean), Some(5.0));
        assert_eq!(m.distance(&[3.0, 4.0], MetricKind::Diagonal), Some(2.5));
        assert_eq!(m.distance(&[3.0, 4.0], MetricKind::ScaledIdentity), Some(2.5));
        assert!((m.distance(&[3.0, 4.0], MetricKind::Mahalanobis).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn distance_to_own_center_is_zero() {
        let m = model(&[1.0, -2.0], &[2.0, 0.5, 0.5, 1.0]);
        for metric in MetricKind::ALL {
            assert_eq!(m.distance(&[1.0, -2.0], metric), Some(0.0));
        }
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let m = model(&[0.0, 0.0], &[2.0, 0.5, 0.5, 1.0]);
        let inv = DMatrix::<f64>::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])
            .try_inverse()
            .unwrap();
        let v = DVector::<f64>::from_row_slice(&[1.0, 3.0]);
        let want: f64 = (v.transpose() * inv * &v)[(0, 0)];
        let want = want.sqrt();
        assert!((m.distance(&[1.0, 3.0], MetricKind::Mahalanobis).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn shrinkage_makes_rank_deficient_covariance_usable() {
        let feats = vec![sv(&[0.0, 0.0, 0.0]), sv(&[1.0, 1.0, 0.0]), sv(&[2.0, 2.0, 0.0])];
        let raw = fit_statistics(std::slice::from_ref(&feats), 0.0).unwrap();
        assert!(raw.check(MetricKind::Mahalanobis).is_err());
        let shrunk = fit_statistics(&[feats], DEFAULT_SHRINKAGE).unwrap();
        shrunk.check(MetricKind::Mahalanobis).unwrap();
    }

    #[test]
    fn thresholds() {
        assert!((theta1(0.4, 64) - 9.6).abs() < 1e-12);
        assert_eq!(theta2(4.0, 1.0, 6.0), 5.0);
        assert_eq!(theta2(4.0, 0.0, 6.0), 4.0);
    }

    #[test]
    fn metric_names_parse() {
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
        }
        assert!("cosine".parse::<MetricKind>().is_err());
    }

    fn two_class_discriminator(lambda1: f64) -> Discriminator {
        let stats = fit_statistics(&[vec![sv(&[0.0, 0.0])], vec![sv(&[10.0, 0.0])]], 0.0).unwrap();
        let mut cfg = DiscriminatorConfig::new(lambda1);
        cfg.metric = MetricKind::Euclidean;
        Discriminator::new(stats, cfg).unwrap()
    }

    #[test]
    fn sample_at_known_center_is_known() {
        let mut d = two_class_discriminator(0.2);
        let p = d.discriminate(&sv(&[10.0, 0.0])).unwrap();
        assert_eq!(p.tag, Tag::Known(1));
        assert_eq!(p.d1, 0.0);
    }

    #[test]
    fn registry_grows_and_means() {
        // Θ1 = 0.2·3·√2 ≈ 0.85
        let mut d = two_class_discriminator(0.2);
        let p = d.discriminate(&sv(&[0.0, 20.0])).unwrap();
        assert_eq!(p.tag, Tag::Unknown(0));
        assert_eq!(d.registry().get(0).unwrap().center(), &[0.0, 20.0]);
        // d1 = 20.1, Θ2 ≈ 10.5, d2 = 0.2
        let p = d.discriminate(&sv(&[0.0, 20.2])).unwrap();
        assert_eq!(p.tag, Tag::Unknown(0));
        let c = d.registry().get(0).unwrap().center();
        assert!((c[1] - 20.1).abs() < 1e-12);
        // far from both known and R1
        let p = d.discriminate(&sv(&[-50.0, -50.0])).unwrap();
        assert_eq!(p.tag, Tag::Unknown(1));
        let snap = d.registry().snapshot();
        assert_eq!(snap.labels[0].label, "R1");
        assert_eq!(snap.labels[0].members, 2);
        assert_eq!(snap.labels[1].members, 1);
    }

    #[test]
    fn frozen_mode_leaves_registry_alone() {
        let mut d = two_class_discriminator(0.2);
        d.discriminate(&sv(&[0.0, 20.0])).unwrap();
        let before = d.registry().snapshot();
        assert_eq!(d.discriminate_frozen(&sv(&[0.0, 20.1])).unwrap().tag, Tag::Unknown(0));
        assert_eq!(d.discriminate_frozen(&sv(&[90.0, 90.0])).unwrap().tag, Tag::Novel);
        assert_eq!(d.discriminate_frozen(&sv(&[0.1, 0.0])).unwrap().tag, Tag::Known(0));
        assert_eq!(d.registry().snapshot(), before);
    }

    #[test]
    fn update_known_moves_known_center() {
        let stats = fit_statistics(&[vec![sv(&[0.0]), sv(&[2.0])]], 0.0).unwrap();
        let mut cfg = DiscriminatorConfig::new(1.0);
        cfg.metric = MetricKind::Euclidean;
        cfg.update_known = true;
        let mut d = Discriminator::new(stats, cfg).unwrap();
        d.discriminate(&sv(&[2.5])).unwrap();
        assert!((d.stats().classes[0].center[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn registry_update_rules() {
        let mut r = UnknownRegistry::new();
        let u = r.create(&[0.0, 0.0]);
        r.update(u, &[2.0, 2.0]).unwrap();
        assert_eq!(r.get(u).unwrap().center(), &[1.0, 1.0]);
        r.update(u, &[1.0, 1.0]).unwrap();
        assert_eq!(r.get(u).unwrap().center(), &[1.0, 1.0]);
        assert_eq!(r.update(5, &[0.0, 0.0]), Err(DiscriminatorError::UnknownLabel(5)));
    }

    #[test]
    fn small_unknown_groups_use_identity() {
        let mut cfg = DiscriminatorConfig::new(1.0);
        cfg.unknown_covariance = true;
        let mut r = UnknownRegistry::new();
        let u = r.create(&[1.0, 1.0]);
        assert_eq!(r.metric_model(u, &cfg).unwrap().covariance, DMatrix::identity(2, 2));
        r.update(u, &[1.0, 1.0]).unwrap();
        assert_eq!(r.metric_model(u, &cfg).unwrap().covariance, DMatrix::identity(2, 2));
    }

    #[test]
    fn invalid_lambdas_rejected() {
        assert!(DiscriminatorConfig::new(0.0).validate().is_err());
        let mut c = DiscriminatorConfig::new(0.5);
        c.lambda2 = -1.0;
        assert!(c.validate().is_err());
    }
}
