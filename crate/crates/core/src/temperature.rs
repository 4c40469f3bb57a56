//! Temperature scaling baseline.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bandwidth::{golden_section_minimize, PROB_FLOOR};
use crate::error::{KcalError, Result};
use crate::kde::ProbMatrix;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
const LOG_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
    /// Set when the fitted temperature sits on the edge of the search range.
    pub at_search_bound: bool,
}

/// Row-wise softmax with max-shift.
pub fn softmax(logits: ArrayView2<f64>) -> ProbMatrix {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    ProbMatrix::from_valid(out)
}

fn log_softmax_at(row: &[f64], inv_t: f64, y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&z| ((z - max) * inv_t).exp()).sum::<f64>().ln();
    (row[y] - max) * inv_t - lse
}

/// Mean NLL of `softmax(logits / t)`, with the same clamp as the metrics.
pub fn temperature_nll(logits: ArrayView2<f64>, labels: &[usize], t: f64) -> f64 {
    let logits = logits.as_standard_layout();
    let k = logits.ncols();
    let flat = logits.as_slice().expect("standard layout");
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax_at(&flat[i * k..(i + 1) * k], 1.0 / t, y).max(PROB_FLOOR.ln()))
        .sum();
    s / labels.len() as f64
}

/// Fits `T` in `[0.05, 20]` by golden-section search over `log T`.
pub fn fit_temperature(logits: ArrayView2<f64>, labels: &[usize]) -> Result<TemperatureModel> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(KcalError::Argument(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= logits.ncols()) {
        return Err(KcalError::Argument("label out of range for the logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(KcalError::Validation("non-finite logit".into()));
    }
    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let min = golden_section_minimize(|log_t| temperature_nll(logits, labels, log_t.exp()), lo, hi, LOG_TOL)?;
    let at_search_bound = min.x - lo <= 2.0 * LOG_TOL || hi - min.x <= 2.0 * LOG_TOL;
    if at_search_bound {
        log::warn!("fitted temperature {} is at the search bound", min.x.exp());
    }
    Ok(TemperatureModel {
        temperature: min.x.exp(),
        at_search_bound,
    })
}

pub fn apply_temperature(model: &TemperatureModel, logits: ArrayView2<f64>) -> ProbMatrix {
    let scaled: Array2<f64> = logits.mapv(|z| z / model.temperature);
    softmax(scaled.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::argmax;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let p = softmax(array![[0.0, 0.0], [1000.0, 0.0]].view());
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert!((p.row(1)[0] - 1.0).abs() < 1e-15 && p.row(1)[1] < 1e-300);
        let a = softmax(array![[0.3, -1.2, 2.0]].view());
        let b = softmax(array![[100.3, 98.8, 102.0]].view());
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Logits whose softmax is the true label distribution.
    fn calibrated_fixture(seed: u64, n: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let probs = softmax(logits.view());
        let labels = (0..n)
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
                row.len() - 1
            })
            .collect();
        (logits, labels)
    }

    fn grid_oracle(logits: &Array2<f64>, labels: &[usize]) -> f64 {
        crate::bandwidth::log_grid(T_MIN, T_MAX, 2000)
            .into_iter()
            .min_by(|a, b| temperature_nll(logits.view(), labels, *a).total_cmp(&temperature_nll(logits.view(), labels, *b)))
            .unwrap()
    }

    #[test]
    fn calibrated_logits_fit_near_one() {
        let (logits, labels) = calibrated_fixture(1, 20_000);
        let m = fit_temperature(logits.view(), &labels).unwrap();
        assert!((m.temperature - 1.0).abs() < 0.1, "T = {}", m.temperature);
        let oracle = grid_oracle(&logits, &labels);
        assert!((m.temperature / oracle - 1.0).abs() < 0.01);
        assert!(!m.at_search_bound);
    }

    #[test]
    fn scaled_logits_scale_temperature() {
        let (logits, labels) = calibrated_fixture(2, 5_000);
        let t1 = fit_temperature(logits.view(), &labels).unwrap().temperature;
        let t10 = fit_temperature((&logits * 10.0).view(), &labels).unwrap().temperature;
        assert!((t10 / (10.0 * t1) - 1.0).abs() < 1e-3, "{t1} {t10}");
    }

    #[test]
    fn single_sample_hits_bound() {
        let m = fit_temperature(array![[2.0, 0.0]].view(), &[0]).unwrap();
        assert!(m.at_search_bound);
        assert!(m.temperature < 0.06);
    }

    #[test]
    fn application_properties() {
        let (logits, labels) = calibrated_fixture(3, 200);
        let id = apply_temperature(&TemperatureModel { temperature: 1.0, at_search_bound: false }, logits.view());
        assert_eq!(id, softmax(logits.view()));
        let hot = apply_temperature(&TemperatureModel { temperature: 1e6, at_search_bound: false }, logits.view());
        assert!(hot.as_array().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-4));
        let m = fit_temperature(logits.view(), &labels).unwrap();
        let scaled = apply_temperature(&m, logits.view());
        for i in 0..200 {
            assert_eq!(argmax(scaled.row(i)), argmax(id.row(i)));
        }
        assert!(temperature_nll(logits.view(), &labels, m.temperature) <= temperature_nll(logits.view(), &labels, 1.0));
    }
}
