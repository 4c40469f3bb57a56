//! Accuracy, calibration error and proper scoring rules for probability
//! matrices, plus reliability-diagram data.

use serde::{Deserialize, Serialize};

use crate::bandwidth::PROB_FLOOR;
use crate::error::{KcalError, Result};
use crate::kde::ProbMatrix;
use crate::math::argmax;

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_MIN_COUNT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinKind {
    /// Equal-mass bins.
    Adaptive,
    /// Equal-width bins on `[0, 1]`.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub kind: BinKind,
    pub n_bins: usize,
}

impl BinningScheme {
    pub fn adaptive(n_bins: usize) -> Self {
        Self {
            kind: BinKind::Adaptive,
            n_bins,
        }
    }

    pub fn fixed_width(n_bins: usize) -> Self {
        Self {
            kind: BinKind::Static,
            n_bins,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(KcalError::Argument("need at least one bin".into()));
        }
        Ok(())
    }
}

impl Default for BinningScheme {
    fn default() -> Self {
        Self::adaptive(DEFAULT_BINS)
    }
}

/// Which predictions count toward class-wise calibration error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum ThresholdRule {
    /// Keep `p_ik >= max(0.01, 1/K)`.
    #[default]
    Standard,
    Absolute(f64),
}

impl ThresholdRule {
    pub fn threshold(&self, num_classes: usize) -> f64 {
        match *self {
            ThresholdRule::Standard => 0.01f64.max(1.0 / num_classes as f64),
            ThresholdRule::Absolute(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub mean_predicted: f64,
    pub frequency: f64,
    pub count: usize,
}

impl BinStats {
    pub fn gap(&self) -> f64 {
        (self.mean_predicted - self.frequency).abs()
    }
}

fn check_inputs(probs: &ProbMatrix, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(KcalError::Argument(format!(
            "{} probability rows but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.num_classes()) {
        return Err(KcalError::Argument(format!(
            "label {bad} out of range for {} classes",
            probs.num_classes()
        )));
    }
    Ok(())
}

/// Bins `(predicted, outcome)` pairs. Empty bins are returned with count 0.
///
/// Adaptive binning sorts by `(predicted, original index)` and gives bin `j`
/// the sorted positions `[ceil(j n / B), ceil((j + 1) n / B))`.
pub fn bin_pairs(predicted: &[f64], outcome: &[bool], scheme: BinningScheme) -> Vec<BinStats> {
    let nb = scheme.n_bins;
    let mut sums = vec![(0.0f64, 0usize, 0usize); nb];
    match scheme.kind {
        BinKind::Static => {
            for (&p, &o) in predicted.iter().zip(outcome) {
                let j = ((p * nb as f64).floor() as usize).min(nb - 1);
                sums[j].0 += p;
                sums[j].1 += usize::from(o);
                sums[j].2 += 1;
            }
        }
        BinKind::Adaptive => {
            let n = predicted.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]).then(a.cmp(&b)));
            for (j, slot) in sums.iter_mut().enumerate() {
                let start = (j * n).div_ceil(nb);
                let end = ((j + 1) * n).div_ceil(nb);
                for &i in &order[start..end] {
                    slot.0 += predicted[i];
                    slot.1 += usize::from(outcome[i]);
                    slot.2 += 1;
                }
            }
        }
    }
    sums.into_iter()
        .map(|(s, hits, c)| BinStats {
            mean_predicted: if c > 0 { s / c as f64 } else { 0.0 },
            frequency: if c > 0 { hits as f64 / c as f64 } else { 0.0 },
            count: c,
        })
        .collect()
}

fn binned_error(bins: &[BinStats], total: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * b.gap())
        .sum()
}

fn confidence_pairs(probs: &ProbMatrix, labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    (0..probs.nrows())
        .map(|i| {
            let row = probs.row(i);
            let top = argmax(row);
            (row[top], top == labels[i])
        })
        .unzip()
}

fn class_pairs(probs: &ProbMatrix, labels: &[usize], k: usize, threshold: f64) -> (Vec<f64>, Vec<bool>) {
    (0..probs.nrows())
        .filter_map(|i| {
            let p = probs.row(i)[k];
            (p >= threshold).then_some((p, labels[i] == k))
        })
        .unzip()
}

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn accuracy(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if labels.is_empty() {
        return Err(KcalError::Argument("accuracy of an empty set".into()));
    }
    let hits = (0..labels.len())
        .filter(|&i| argmax(probs.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expected calibration error of the top-class confidence.
pub fn ece(probs: &ProbMatrix, labels: &[usize], scheme: BinningScheme) -> Result<f64> {
    check_inputs(probs, labels)?;
    scheme.validate()?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (conf, correct) = confidence_pairs(probs, labels);
    Ok(binned_error(&bin_pairs(&conf, &correct, scheme), labels.len()))
}

/// Class-wise expected calibration error, averaged over the classes that
/// keep at least one prediction after thresholding.
pub fn cece(probs: &ProbMatrix, labels: &[usize], scheme: BinningScheme, rule: ThresholdRule) -> Result<f64> {
    check_inputs(probs, labels)?;
    scheme.validate()?;
    let k = probs.num_classes();
    let threshold = rule.threshold(k);
    let mut total = 0.0;
    let mut used = 0usize;
    for class in 0..k {
        let (p, hit) = class_pairs(probs, labels, class, threshold);
        if p.is_empty() {
            continue;
        }
        total += binned_error(&bin_pairs(&p, &hit, scheme), p.len());
        used += 1;
    }
    if used == 0 {
        return Err(KcalError::Validation(
            "every class was filtered out by the class-wise threshold".into(),
        ));
    }
    Ok(total / used as f64)
}

/// Squared error of the top-class probability against its correctness.
pub fn brier_top(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (conf, correct) = confidence_pairs(probs, labels);
    let s: f64 = conf
        .iter()
        .zip(&correct)
        .map(|(&c, &ok)| (c - f64::from(u8::from(ok))).powi(2))
        .sum();
    Ok(s / labels.len() as f64)
}

/// Multi-class Brier score normalized by `n K`.
pub fn brier_multi(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let k = probs.num_classes();
    let mut s = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (c, &p) in probs.row(i).iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            s += (p - target) * (p - target);
        }
    }
    Ok(s / (labels.len() * k) as f64)
}

/// Mean negative log-likelihood with probabilities clamped at `1e-12`.
pub fn nll(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(PROB_FLOOR).ln())
        .sum();
    Ok(s / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "axis", content = "class")]
pub enum ReliabilityAxis {
    Confidence,
    Class(usize),
}

impl std::str::FromStr for ReliabilityAxis {
    type Err = KcalError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "confidence" {
            return Ok(Self::Confidence);
        }
        s.strip_prefix("class:")
            .and_then(|k| k.parse().ok())
            .map(Self::Class)
            .ok_or_else(|| KcalError::Argument(format!("bad axis {s:?}; use confidence or class:<k>")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityData {
    pub axis: ReliabilityAxis,
    pub scheme: BinningScheme,
    pub min_count: usize,
    /// Number of samples binned (after class-wise thresholding).
    pub total: usize,
    pub bins: Vec<BinStats>,
}

impl ReliabilityData {
    /// `sum(count / total * gap)` over the retained bins.
    pub fn weighted_gap(&self) -> f64 {
        binned_error(&self.bins, self.total.max(1))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mean_predicted,frequency,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{}\n", b.mean_predicted, b.frequency, b.count));
        }
        out
    }
}

pub fn reliability_data(
    probs: &ProbMatrix,
    labels: &[usize],
    axis: ReliabilityAxis,
    scheme: BinningScheme,
    min_count: usize,
) -> Result<ReliabilityData> {
    check_inputs(probs, labels)?;
    scheme.validate()?;
    let (pred, outcome) = match axis {
        ReliabilityAxis::Confidence => confidence_pairs(probs, labels),
        ReliabilityAxis::Class(k) => {
            if k >= probs.num_classes() {
                return Err(KcalError::Argument(format!(
                    "class {k} out of range for {} classes",
                    probs.num_classes()
                )));
            }
            class_pairs(probs, labels, k, ThresholdRule::Standard.threshold(probs.num_classes()))
        }
    };
    let mut bins: Vec<BinStats> = bin_pairs(&pred, &outcome, scheme)
        .into_iter()
        .filter(|b| b.count > 0 && b.count >= min_count)
        .collect();
    bins.sort_by(|a, b| a.mean_predicted.total_cmp(&b.mean_predicted));
    Ok(ReliabilityData {
        axis,
        scheme,
        min_count,
        total: pred.len(),
        bins,
    })
}

/// Every scalar metric for one binning scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scheme: BinningScheme,
    pub threshold_rule: ThresholdRule,
    pub n: usize,
    pub num_classes: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub cece: f64,
    pub brier_top: f64,
    pub brier_multi: f64,
    pub nll: f64,
}

pub fn evaluate(probs: &ProbMatrix, labels: &[usize], scheme: BinningScheme, rule: ThresholdRule) -> Result<MetricReport> {
    Ok(MetricReport {
        scheme,
        threshold_rule: rule,
        n: labels.len(),
        num_classes: probs.num_classes(),
        accuracy: accuracy(probs, labels)?,
        ece: ece(probs, labels, scheme)?,
        cece: cece(probs, labels, scheme, rule)?,
        brier_top: brier_top(probs, labels)?,
        brier_multi: brier_multi(probs, labels)?,
        nll: nll(probs, labels)?,
    })
}
