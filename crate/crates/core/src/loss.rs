//! Cross-entropy, center and reconstruction losses, their weighted sum, and
//! the per-batch center-table update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Scalar, Tensor};

/// Floor applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} outside the {classes} known classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-class semantic centers `c_j` (one row per known class) and the
/// center learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTable<T = f32> {
    pub centers: Tensor<T>,
    pub alpha: f64,
}

impl<T: Scalar> CenterTable<T> {
    pub fn zeros(classes: usize, dim: usize, alpha: f64) -> Self {
        Self {
            centers: Tensor::zeros(&[classes, dim]),
            alpha,
        }
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, class: usize) -> &[T] {
        let d = self.dim();
        &self.centers.data()[class * d..(class + 1) * d]
    }

    /// `c_j ← c_j − α Δ_j` for every class.
    pub fn apply_delta(&mut self, delta: &Tensor<T>) -> Result<(), LossError> {
        if delta.shape() != self.centers.shape() {
            return Err(LossError::ShapeMismatch(format!(
                "center delta {:?} vs table {:?}",
                delta.shape(),
                self.centers.shape()
            )));
        }
        let alpha = T::from_f64c(self.alpha);
        for (c, &d) in self.centers.data_mut().iter_mut().zip(delta.data()) {
            *c -= alpha * d;
        }
        Ok(())
    }
}

/// Loss weights and ablation switches. A switched-off term contributes
/// neither to the total nor to any gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ct: f64,
    pub lambda_r: f64,
    pub ce_on: bool,
    pub ct_on: bool,
    pub r_on: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ct: 0.1,
            lambda_r: 1.0,
            ce_on: true,
            ct_on: true,
            r_on: true,
        }
    }
}

impl LossWeights {
    /// Effective multiplier of each term in the total: (ce, ct, r).
    pub fn factors(&self) -> (f64, f64, f64) {
        (
            if self.ce_on { 1.0 } else { 0.0 },
            if self.ct_on { self.lambda_ct } else { 0.0 },
            if self.r_on { self.lambda_r } else { 0.0 },
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub ce: f64,
    pub ct: f64,
    pub r: f64,
    pub total: f64,
}

impl BatchLoss {
    pub fn new(ce: f64, ct: f64, r: f64, weights: &LossWeights) -> Self {
        Self {
            ce,
            ct,
            r,
            total: total_loss(ce, ct, r, weights),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.ct.is_finite() && self.r.is_finite() && self.total.is_finite()
    }
}

fn rows<T: Scalar>(t: &Tensor<T>, labels: &[usize], what: &str) -> Result<usize, LossError> {
    match *t.shape() {
        [n, k] if n == labels.len() => Ok(k),
        ref s => Err(LossError::ShapeMismatch(format!(
            "{what} must be ({} rows, width), got {s:?}",
            labels.len()
        ))),
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean negative log-probability of the true class over `(N, K)`
/// probability rows.
pub fn cross_entropy<T: Scalar>(predictions: &Tensor<T>, labels: &[usize]) -> Result<f64, LossError> {
    let k = rows(predictions, labels, "predictions")?;
    check_labels(labels, k)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predictions
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| -row[y].to_f64c().max(LOG_FLOOR).ln())
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Gradient of softmax followed by [`cross_entropy`] with respect to the
/// logits: `(p − onehot(y)) / N`.
pub fn cross_entropy_grad_logits<T: Scalar>(predictions: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>, LossError> {
    let k = rows(predictions, labels, "predictions")?;
    check_labels(labels, k)?;
    let inv_n = T::from_f64c(1.0 / labels.len().max(1) as f64);
    let mut grad = predictions.clone();
    for (row, &y) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(grad)
}

fn check_features<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    table: &CenterTable<T>,
) -> Result<usize, LossError> {
    let t = rows(features, labels, "features")?;
    if t != table.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "feature dim {t} vs center dim {}",
            table.dim()
        )));
    }
    check_labels(labels, table.classes())?;
    Ok(t)
}

/// `(1/2N) Σ ||z_i − c_{y_i}||²`.
pub fn center_loss<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    table: &CenterTable<T>,
) -> Result<f64, LossError> {
    let t = check_features(features, labels, table)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = features
        .data()
        .chunks_exact(t)
        .zip(labels)
        .map(|(z, &y)| {
            z.iter()
                .zip(table.center(y))
                .map(|(&a, &c)| (a.to_f64c() - c.to_f64c()).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / (2.0 * labels.len() as f64))
}

/// `∂L_ct/∂z_i = (z_i − c_{y_i}) / N`.
pub fn center_loss_grad<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    table: &CenterTable<T>,
) -> Result<Tensor<T>, LossError> {
    let t = check_features(features, labels, table)?;
    let inv_n = T::from_f64c(1.0 / labels.len().max(1) as f64);
    let mut grad = features.clone();
    for (z, &y) in grad.data_mut().chunks_exact_mut(t).zip(labels) {
        for (v, &c) in z.iter_mut().zip(table.center(y)) {
            *v = (*v - c) * inv_n;
        }
    }
    Ok(grad)
}

/// Per-class center step `Δ_j`, one row per class of the table.
///
/// Classes absent from the batch get `Δ_j = 0`. For present classes
/// `Δ_j = Σ_{i: y_i = j} (c_j − z_i) / n_j`; with `classic` the denominator
/// becomes `1 + n_j`.
pub fn center_delta<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    table: &CenterTable<T>,
    classic: bool,
) -> Result<Tensor<T>, LossError> {
    let t = check_features(features, labels, table)?;
    let k = table.classes();
    let mut acc = vec![0.0f64; k * t];
    let mut counts = vec![0usize; k];
    for (z, &y) in features.data().chunks_exact(t).zip(labels) {
        counts[y] += 1;
        for ((a, &zi), &c) in acc[y * t..(y + 1) * t].iter_mut().zip(z).zip(table.center(y)) {
            *a += c.to_f64c() - zi.to_f64c();
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let denom = if classic { 1.0 + n as f64 } else { n as f64 };
        acc[j * t..(j + 1) * t].iter_mut().for_each(|a| *a /= denom);
    }
    Ok(Tensor::from_f64(&[k, t], &acc).expect("sized"))
}

fn check_pair<T: Scalar>(recons: &Tensor<T>, originals: &Tensor<T>) -> Result<usize, LossError> {
    if recons.shape() != originals.shape() || recons.shape().is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "reconstructions {:?} vs originals {:?}",
            recons.shape(),
            originals.shape()
        )));
    }
    Ok(recons.shape()[0])
}

/// `(1/2N) Σ ||x̃_i − x_i||²` over a batch whose leading axis is N.
pub fn reconstruction_loss<T: Scalar>(recons: &Tensor<T>, originals: &Tensor<T>) -> Result<f64, LossError> {
    let n = check_pair(recons, originals)?;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = recons
        .data()
        .iter()
        .zip(originals.data())
        .map(|(&a, &b)| (a.to_f64c() - b.to_f64c()).powi(2))
        .sum();
    Ok(sum / (2.0 * n as f64))
}

/// `∂L_r/∂x̃_i = (x̃_i − x_i) / N`.
pub fn reconstruction_loss_grad<T: Scalar>(recons: &Tensor<T>, originals: &Tensor<T>) -> Result<Tensor<T>, LossError> {
    let n = check_pair(recons, originals)?;
    let inv_n = T::from_f64c(1.0 / n.max(1) as f64);
    let data = recons
        .data()
        .iter()
        .zip(originals.data())
        .map(|(&a, &b)| (a - b) * inv_n)
        .collect();
    Ok(Tensor::from_vec(recons.shape(), data).expect("same shape"))
}

/// `ce + λ_ct·ct + λ_r·r`, each term gated by its switch.
pub fn total_loss(ce: f64, ct: f64, r: f64, weights: &LossWeights) -> f64 {
    let (fce, fct, fr) = weights.factors();
    // Switched-off terms are skipped outright so a non-finite value there
    // cannot leak into the total.
    let mut total = 0.0;
    if fce != 0.0 {
        total += fce * ce;
    }
    if fct != 0.0 {
        total += fct * ct;
    }
    if fr != 0.0 {
        total += fr * r;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&t(&[1, 2], &[0.0, 1.0]), &[1]).unwrap(), 0.0);
        let uniform = cross_entropy(&t(&[1, 4], &[0.25; 4]), &[2]).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        let half = cross_entropy(&t(&[2, 2], &[0.5; 4]), &[0, 1]).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&t(&[1, 2], &[0.5, 0.5]), &[2]),
            Err(LossError::LabelOutOfRange { label: 2, classes: 2 })
        ));
        // saturated wrong prediction is floored, not infinite
        let floored = cross_entropy(&t(&[1, 2], &[1.0, 0.0]), &[1]).unwrap();
        assert!((floored - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn center_loss_examples() {
        let mut table = CenterTable::<f64>::zeros(2, 2, 0.5);
        assert_eq!(center_loss(&t(&[1, 2], &[0.0, 0.0]), &[0], &table).unwrap(), 0.0);
        assert_eq!(center_loss(&t(&[1, 2], &[1.0, 1.0]), &[0], &table).unwrap(), 1.0);
        // squared distances 4 and 0
        table.centers = t(&[2, 2], &[0.0, 0.0, 5.0, 5.0]);
        assert_eq!(
            center_loss(&t(&[2, 2], &[2.0, 0.0, 5.0, 5.0]), &[0, 1], &table).unwrap(),
            1.0
        );
        assert!(center_loss(&t(&[1, 3], &[0.0; 3]), &[0], &table).is_err());
    }

    #[test]
    fn center_delta_examples() {
        let mut table = CenterTable::<f64>::zeros(2, 2, 0.5);
        table.centers = t(&[2, 2], &[1.0, 0.0, 9.0, 9.0]);
        let d = center_delta(&t(&[1, 2], &[0.0, 0.0]), &[0], &table, false).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
        table.apply_delta(&d).unwrap();
        assert_eq!(table.center(0), &[0.5, 0.0]);
        assert_eq!(table.center(1), &[9.0, 9.0]);

        table.centers = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let d = center_delta(&t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]), &[0, 0], &table, false).unwrap();
        assert_eq!(d.data(), &[0.0; 4]);
    }

    #[test]
    fn classic_update_adds_one_to_denominator() {
        let mut table = CenterTable::<f64>::zeros(1, 1, 1.0);
        table.centers = t(&[1, 1], &[2.0]);
        let d = center_delta(&t(&[1, 1], &[0.0]), &[0], &table, true).unwrap();
        assert_eq!(d.data(), &[1.0]);
    }

    #[test]
    fn reconstruction_examples() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let off = t(&[1, 4], &[1.0, 4.0, 3.0, 4.0]);
        assert_eq!(reconstruction_loss(&off, &x).unwrap(), 2.0);
        let doubled = t(&[1, 4], &[1.0, 6.0, 3.0, 4.0]);
        assert_eq!(reconstruction_loss(&doubled, &x).unwrap(), 8.0);
        assert!(reconstruction_loss(&t(&[1, 3], &[0.0; 3]), &x).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let off = LossWeights {
            lambda_ct: 0.0,
            lambda_r: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(1.3, 2.0, 3.0, &off), 1.3);
        let w = LossWeights {
            lambda_ct: 0.1,
            lambda_r: 1.0,
            ..Default::default()
        };
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 4.2).abs() < 1e-15);
        let no_ct = LossWeights { ct_on: false, ..w };
        assert_eq!(total_loss(1.0, 1e9, 3.0, &no_ct), 4.0);
    }
}
