//! Isotropic Gaussian mixtures with an exact Bayes posterior.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingDataset;
use crate::error::{KcalError, Result};
use crate::kde::ProbMatrix;
use crate::math::normalize_log_row;

/// Mixture parameters: one mean per class, shared variance `sigma^2 I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOracle {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub priors: Vec<f64>,
    pub seed: u64,
}

impl GmmOracle {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() < 2 {
            return Err(KcalError::Argument("need at least 2 classes".into()));
        }
        if self.means.iter().any(|m| m.len() != self.dim()) || self.dim() == 0 {
            return Err(KcalError::Argument("means must share a positive dimension".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(KcalError::Argument(format!("sigma must be positive, got {}", self.sigma)));
        }
        validate_priors(&self.priors, self.means.len())
    }

    /// Draws `n` labelled samples; classes follow the priors.
    pub fn sample(&self, n: usize, seed: u64) -> Result<EmbeddingDataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = WeightedIndex::new(&self.priors).map_err(|e| KcalError::Argument(e.to_string()))?;
        let labels: Vec<usize> = (0..n).map(|_| classes.sample(&mut rng)).collect();
        let x = self.draw_points(&labels, &mut rng);
        EmbeddingDataset::new(x, labels, self.num_classes())
    }

    /// Draws exactly `counts[k]` samples of class `k`, grouped by class.
    pub fn sample_per_class(&self, counts: &[usize], seed: u64) -> Result<EmbeddingDataset> {
        self.validate()?;
        if counts.len() != self.num_classes() {
            return Err(KcalError::Argument("one count per class required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
            .collect();
        let x = self.draw_points(&labels, &mut rng);
        EmbeddingDataset::new(x, labels, self.num_classes())
    }

    fn draw_points(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Array2<f64> {
        let h = self.dim();
        let mut x = Array2::zeros((labels.len(), h));
        for (mut row, &y) in x.rows_mut().into_iter().zip(labels) {
            for (v, &mu) in row.iter_mut().zip(&self.means[y]) {
                let z: f64 = StandardNormal.sample(rng);
                *v = mu + self.sigma * z;
            }
        }
        x
    }

    /// Unnormalized log posterior `log pi_k - |x - mu_k|^2 / (2 sigma^2)`.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.means
            .iter()
            .zip(&self.priors)
            .map(|(mu, &pi)| {
                let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                pi.ln() - d2 / s2
            })
            .collect()
    }

    /// Scaled log posterior, used to build deliberately miscalibrated logits:
    /// `scale * log P(y = k | x) + offsets[k]`.
    pub fn logits(&self, x: ArrayView2<f64>, scale: f64, offsets: &[f64]) -> Result<Array2<f64>> {
        let post = oracle_posterior(self, x)?;
        let k = self.num_classes();
        if !offsets.is_empty() && offsets.len() != k {
            return Err(KcalError::Argument("one offset per class required".into()));
        }
        Ok(Array2::from_shape_fn((x.nrows(), k), |(i, c)| {
            let lp = post.row(i)[c].max(f64::MIN_POSITIVE).ln();
            scale * lp + offsets.get(c).copied().unwrap_or(0.0)
        }))
    }
}

fn validate_priors(priors: &[f64], k: usize) -> Result<()> {
    if priors.len() != k {
        return Err(KcalError::Argument(format!("expected {k} priors, got {}", priors.len())));
    }
    if priors.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(KcalError::Argument("priors must be nonnegative".into()));
    }
    let s: f64 = priors.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(KcalError::Argument(format!("priors sum to {s}, not 1")));
    }
    Ok(())
}

fn pairwise_min_max(points: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    (lo, hi)
}

/// Places `k` means with minimum pairwise distance exactly `separation`.
///
/// Candidates are standard-normal draws; a draw is rejected while its
/// closest pair is under half its farthest pair (up to 1000 tries, keeping
/// the best), then the set is rescaled.
fn place_means(k: usize, h: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..1000 {
        let cand: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..h).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect();
        let (lo, hi) = pairwise_min_max(&cand);
        let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
        let better = best.as_ref().is_none_or(|(r, _)| ratio > *r);
        if better {
            best = Some((ratio, cand));
        }
        if ratio >= 0.5 {
            break;
        }
    }
    let mut means = best.expect("at least one candidate").1;
    let (lo, _) = pairwise_min_max(&means);
    let scale = if lo > 0.0 { separation / lo } else { 0.0 };
    for m in &mut means {
        for v in m.iter_mut() {
            *v *= scale;
        }
    }
    means
}

/// Builds a mixture and draws `n` samples from it.
pub fn generate_gmm(
    num_classes: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    priors: &[f64],
    n: usize,
    seed: u64,
) -> Result<(EmbeddingDataset, GmmOracle)> {
    let oracle = make_oracle(num_classes, dim, separation, sigma, priors, seed)?;
    let ds = oracle.sample(n, seed.wrapping_add(1))?;
    Ok((ds, oracle))
}

/// The mixture of [`generate_gmm`] without drawing samples.
pub fn make_oracle(
    num_classes: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    priors: &[f64],
    seed: u64,
) -> Result<GmmOracle> {
    if num_classes < 2 || dim == 0 {
        return Err(KcalError::Argument("need K >= 2 and h >= 1".into()));
    }
    if !(separation >= 0.0) {
        return Err(KcalError::Argument("separation must be >= 0".into()));
    }
    validate_priors(priors, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = GmmOracle {
        means: place_means(num_classes, dim, separation, &mut rng),
        sigma,
        priors: priors.to_vec(),
        seed,
    };
    oracle.validate()?;
    Ok(oracle)
}

/// Exact Bayes posterior, computed in log space.
pub fn oracle_posterior(oracle: &GmmOracle, x: ArrayView2<f64>) -> Result<ProbMatrix> {
    oracle.validate()?;
    if x.ncols() != oracle.dim() {
        return Err(KcalError::Argument(format!(
            "oracle dimension {} but points have {} columns",
            oracle.dim(),
            x.ncols()
        )));
    }
    let mut out = Array2::zeros((x.nrows(), oracle.num_classes()));
    for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
        let mut lj = oracle.log_joint(&row.to_vec());
        normalize_log_row(&mut lj);
        o.assign(&ndarray::ArrayView1::from(&lj[..]));
    }
    Ok(ProbMatrix::from_valid(out))
}

/// Mean absolute deviation between predicted and true posteriors over all
/// samples and classes.
pub fn full_calibration_error(pred: &ProbMatrix, truth: &ProbMatrix) -> Result<f64> {
    if pred.as_array().dim() != truth.as_array().dim() {
        return Err(KcalError::Argument(format!(
            "shape mismatch {:?} vs {:?}",
            pred.as_array().dim(),
            truth.as_array().dim()
        )));
    }
    let n = pred.as_array().len();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = pred
        .as_array()
        .iter()
        .zip(truth.as_array().iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / n as f64)
}

/// Samples labels from each row's distribution.
pub fn sample_labels(probs: &ProbMatrix, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..probs.nrows())
        .map(|i| {
            let u: f64 = rng.random();
            let row = probs.row(i);
            let mut acc = 0.0;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k;
                }
            }
            row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        })
        .collect()
}
