//! Open-set and zero-shot scoring: outcome counts, true rates, precision
//! with isotopic-label resolution, F1, WTR and the discrimination interval.
//!
//! Rates whose denominator is zero are `None` (`null` in JSON, `NA` in CSV).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{unknown_label_name, MetricKind, Tag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sample {index} has label {label}, outside the {classes} declared classes")]
    Unlabeled { index: usize, label: usize, classes: usize },
    #[error("{predictions} predictions for {truth} labels")]
    Length { predictions: usize, truth: usize },
    #[error("predicted known class {0} does not exist")]
    BadPrediction(usize),
    #[error("empty sweep")]
    EmptySweep,
    #[error("sweep is not sorted by lambda1")]
    UnsortedSweep,
    #[error("malformed report row: {0}")]
    Parse(String),
}

/// Tallies of one discrimination run. Truth labels `0..known` are known
/// classes, `known..known + unknown` unknown ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub known: usize,
    pub unknown: usize,
    pub tk: usize,
    pub tu: usize,
    pub fk: usize,
    pub fu: usize,
    /// Per true class (known then unknown): sample count.
    pub class_totals: Vec<usize>,
    /// Per known class: samples assigned to exactly that class.
    pub known_correct: Vec<usize>,
    /// `contingency[label][class]`: members of discovered unknown label
    /// `label` whose true class is `class`.
    pub contingency: Vec<Vec<usize>>,
    /// Samples rejected as unknown without receiving a label.
    pub unlabeled_rejections: usize,
}

pub fn tally(
    predictions: &[Tag],
    truth: &[usize],
    known: usize,
    unknown: usize,
) -> Result<OutcomeCounts, MetricsError> {
    if predictions.len() != truth.len() {
        return Err(MetricsError::Length {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let classes = known + unknown;
    let mut c = OutcomeCounts {
        known,
        unknown,
        tk: 0,
        tu: 0,
        fk: 0,
        fu: 0,
        class_totals: vec![0; classes],
        known_correct: vec![0; known],
        contingency: Vec::new(),
        unlabeled_rejections: 0,
    };
    for (index, (&tag, &label)) in predictions.iter().zip(truth).enumerate() {
        if label >= classes {
            return Err(MetricsError::Unlabeled { index, label, classes });
        }
        c.class_totals[label] += 1;
        let is_known = label < known;
        match tag {
            Tag::Known(k) => {
                if k >= known {
                    return Err(MetricsError::BadPrediction(k));
                }
                if is_known {
                    c.tk += 1;
                    if k == label {
                        c.known_correct[label] += 1;
                    }
                } else {
                    c.fk += 1;
                }
            }
            Tag::Unknown(_) | Tag::Novel => {
                if is_known {
                    c.fu += 1;
                } else {
                    c.tu += 1;
                }
                match tag {
                    Tag::Unknown(u) => {
                        if c.contingency.len() <= u {
                            c.contingency.resize(u + 1, vec![0; classes]);
                        }
                        c.contingency[u][label] += 1;
                    }
                    _ => c.unlabeled_rejections += 1,
                }
            }
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl OutcomeCounts {
    pub fn known_samples(&self) -> usize {
        self.tk + self.fu
    }

    pub fn unknown_samples(&self) -> usize {
        self.tu + self.fk
    }

    pub fn tkr(&self) -> Option<f64> {
        ratio(self.tk, self.known_samples())
    }

    pub fn tur(&self) -> Option<f64> {
        ratio(self.tu, self.unknown_samples())
    }

    /// True class each discovered label stands for: the class holding the
    /// plurality of its members, lowest index on ties.
    pub fn label_identity(&self) -> Vec<Option<usize>> {
        self.contingency
            .iter()
            .map(|row| {
                let (best, &count) = row.iter().enumerate().rev().max_by_key(|(_, c)| **c)?;
                (count > 0).then_some(best)
            })
            .collect()
    }

    /// For every unknown class, the labels standing for it, largest share
    /// first. More than one label means isotopic labels.
    pub fn isotopic_labels(&self) -> Vec<Vec<usize>> {
        let identity = self.label_identity();
        (self.known..self.known + self.unknown)
            .map(|class| {
                let mut labels: Vec<usize> = identity
                    .iter()
                    .enumerate()
                    .filter(|(_, id)| **id == Some(class))
                    .map(|(u, _)| u)
                    .collect();
                labels.sort_by_key(|&u| (std::cmp::Reverse(self.contingency[u][class]), u));
                labels
            })
            .collect()
    }

    /// Per unknown class: members captured by its dominant label.
    pub fn dominant_correct(&self) -> Vec<usize> {
        self.isotopic_labels()
            .iter()
            .enumerate()
            .map(|(j, labels)| labels.first().map_or(0, |&u| self.contingency[u][self.known + j]))
            .collect()
    }

    pub fn known_precision(&self) -> Option<f64> {
        ratio(self.known_correct.iter().sum(), self.tk + self.fk)
    }

    pub fn unknown_precision(&self) -> Option<f64> {
        ratio(self.dominant_correct().iter().sum(), self.tu + self.fu)
    }

    /// Per-class accuracy, known classes then unknown ones; for an unknown
    /// class it is the share caught by its dominant label.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        let dominant = self.dominant_correct();
        (0..self.known + self.unknown)
            .map(|c| {
                let hits = if c < self.known {
                    self.known_correct[c]
                } else {
                    dominant[c - self.known]
                };
                ratio(hits, self.class_totals[c])
            })
            .collect()
    }
}

/// Precision/accuracy combination `2·a·p / (a + p)`.
pub fn f1(accuracy: Option<f64>, precision: Option<f64>) -> Option<f64> {
    let (a, p) = (accuracy?, precision?);
    let sum = a + p;
    (sum > 0.0).then(|| 2.0 * a * p / sum)
}

/// Two-term dot product with error-free transforms, so the result is
/// rounded once instead of three times.
fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let p0 = a[0] * b[0];
    let e0 = a[0].mul_add(b[0], -p0);
    let p1 = a[1] * b[1];
    let e1 = a[1].mul_add(b[1], -p1);
    let s = p0 + p1;
    let z = s - p0;
    let es = (p0 - (s - z)) + (p1 - z);
    s + (es + e0 + e1)
}

/// `0.4·TKR + 0.6·TUR`.
pub fn wtr(tkr: Option<f64>, tur: Option<f64>) -> Option<f64> {
    Some(dot2([0.4, 0.6], [tkr?, tur?]))
}

pub const WTR_THRESHOLD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationInterval {
    /// Maximal runs of consecutive grid points with WTR above the
    /// threshold, as `(first λ1, last λ1)`.
    pub ranges: Vec<(f64, f64)>,
    pub width: f64,
}

impl DiscriminationInterval {
    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

pub fn discrimination_interval(sweep: &[(f64, Option<f64>)]) -> Result<DiscriminationInterval, MetricsError> {
    if sweep.is_empty() {
        return Err(MetricsError::EmptySweep);
    }
    if sweep
        .windows(2)
        .any(|w| w[0].0.partial_cmp(&w[1].0) != Some(std::cmp::Ordering::Less))
    {
        return Err(MetricsError::UnsortedSweep);
    }
    let mut ranges = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for &(lambda, w) in sweep {
        if w.is_some_and(|w| w > WTR_THRESHOLD) {
            open = Some(open.map_or((lambda, lambda), |(a, _)| (a, lambda)));
        } else if let Some(r) = open.take() {
            ranges.push(r);
        }
    }
    ranges.extend(open);
    let width = ranges.iter().fold(0.0, |acc, (a, b)| acc + (b - a));
    Ok(DiscriminationInterval { ranges, width })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub name: String,
    pub known: bool,
    pub samples: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotopicCensus {
    pub class: String,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZslReport {
    pub lambda1: f64,
    pub lambda2: f64,
    pub metric: MetricKind,
    pub counts: OutcomeCounts,
    pub tkr: Option<f64>,
    pub tur: Option<f64>,
    pub wtr: Option<f64>,
    pub kp: Option<f64>,
    pub up: Option<f64>,
    pub known_accuracy: Option<f64>,
    pub unknown_accuracy: Option<f64>,
    pub f1_known: Option<f64>,
    pub f1_unknown: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    pub isotopic: Vec<IsotopicCensus>,
    pub discovered_labels: usize,
}

pub const REPORT_CSV_HEADER: &str = "lambda1,lambda2,metric,tk,tu,fk,fu,tkr,tur,wtr,kp,up,known_accuracy,unknown_accuracy,f1_known,f1_unknown,discovered_labels,max_isotopic";

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl ZslReport {
    pub fn new(counts: OutcomeCounts, class_names: &[String], lambda1: f64, lambda2: f64, metric: MetricKind) -> Self {
        let acc = counts.class_accuracy();
        let known = counts.known;
        let per_class = acc
            .iter()
            .enumerate()
            .map(|(c, &accuracy)| ClassAccuracy {
                name: class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                known: c < known,
                samples: counts.class_totals[c],
                accuracy,
            })
            .collect::<Vec<_>>();
        let known_accuracy = mean(acc[..known].iter().copied());
        let unknown_accuracy = mean(acc[known..].iter().copied());
        let (tkr, tur) = (counts.tkr(), counts.tur());
        let (kp, up) = (counts.known_precision(), counts.unknown_precision());
        let isotopic = counts
            .isotopic_labels()
            .iter()
            .enumerate()
            .map(|(j, labels)| IsotopicCensus {
                class: per_class[known + j].name.clone(),
                labels: labels.iter().map(|&u| unknown_label_name(u)).collect(),
            })
            .collect();
        Self {
            lambda1,
            lambda2,
            metric,
            tkr,
            tur,
            wtr: wtr(tkr, tur),
            kp,
            up,
            known_accuracy,
            unknown_accuracy,
            f1_known: f1(known_accuracy, kp),
            f1_unknown: f1(unknown_accuracy, up),
            per_class,
            isotopic,
            discovered_labels: counts.contingency.len(),
            counts,
        }
    }

    pub fn max_isotopic(&self) -> usize {
        self.isotopic.iter().map(|c| c.labels.len()).max().unwrap_or(0)
    }

    pub fn csv_row(&self) -> String {
        let c = &self.counts;
        [
            self.lambda1.to_string(),
            self.lambda2.to_string(),
            self.metric.name().to_string(),
            c.tk.to_string(),
            c.tu.to_string(),
            c.fk.to_string(),
            c.fu.to_string(),
            fmt_rate(self.tkr),
            fmt_rate(self.tur),
            fmt_rate(self.wtr),
            fmt_rate(self.kp),
            fmt_rate(self.up),
            fmt_rate(self.known_accuracy),
            fmt_rate(self.unknown_accuracy),
            fmt_rate(self.f1_known),
            fmt_rate(self.f1_unknown),
            self.discovered_labels.to_string(),
            self.max_isotopic().to_string(),
        ]
        .join(",")
    }
}

/// The flat CSV fields of one report row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub metric: MetricKind,
    pub tk: usize,
    pub tu: usize,
    pub fk: usize,
    pub fu: usize,
    pub tkr: Option<f64>,
    pub tur: Option<f64>,
    pub wtr: Option<f64>,
    pub kp: Option<f64>,
    pub up: Option<f64>,
    pub known_accuracy: Option<f64>,
    pub unknown_accuracy: Option<f64>,
    pub f1_known: Option<f64>,
    pub f1_unknown: Option<f64>,
    pub discovered_labels: usize,
    pub max_isotopic: usize,
}

impl std::str::FromStr for ReportRow {
    type Err = MetricsError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 18 {
            return Err(MetricsError::Parse(format!("{} fields, expected 18", f.len())));
        }
        let err = |i: usize| MetricsError::Parse(format!("field {i}: {:?}", f[i]));
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| err(i));
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| err(i));
        let rate = |i: usize| -> Result<Option<f64>, MetricsError> {
            if f[i] == "NA" {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        Ok(Self {
            lambda1: num(0)?,
            lambda2: num(1)?,
            metric: f[2].parse().map_err(|_| err(2))?,
            tk: int(3)?,
            tu: int(4)?,
            fk: int(5)?,
            fu: int(6)?,
            tkr: rate(7)?,
            tur: rate(8)?,
            wtr: rate(9)?,
            kp: rate(10)?,
            up: rate(11)?,
            known_accuracy: rate(12)?,
            unknown_accuracy: rate(13)?,
            f1_known: rate(14)?,
            f1_unknown: rate(15)?,
            discovered_labels: int(16)?,
            max_isotopic: int(17)?,
        })
    }
}
