//! Kernel evaluation on projected embeddings, in log space.
//!
//! Log-weights are returned without the `1/b^d` and Gaussian normalizing
//! constants. Every consumer forms a ratio of sums of the same kernel, so the
//! constants cancel.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{KcalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::Rbf,
            bandwidth,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(KcalError::Argument(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Log-weight of a single squared distance.
    #[inline]
    pub fn log_weight(&self, sq_dist: f64) -> f64 {
        match self.family {
            KernelFamily::Rbf => -sq_dist / (2.0 * self.bandwidth * self.bandwidth),
        }
    }

    /// Multiplier `c` with `log_weight(s) = c * s`.
    #[inline]
    pub(crate) fn sq_dist_coefficient(&self) -> f64 {
        match self.family {
            KernelFamily::Rbf => -0.5 / (self.bandwidth * self.bandwidth),
        }
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
pub fn pairwise_sq_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(KcalError::Argument(format!(
            "dimension mismatch: {} vs {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, row_a) in a.rows().into_iter().enumerate() {
        for (j, row_b) in b.rows().into_iter().enumerate() {
            out[[i, j]] = row_a
                .iter()
                .zip(row_b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    Ok(out)
}

pub fn log_kernel_weights(sq_dists: &Array2<f64>, spec: &KernelSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    if sq_dists.iter().any(|&d| d < 0.0 || d.is_nan()) {
        return Err(KcalError::Argument("squared distances must be >= 0".into()));
    }
    let mut out = Array2::zeros(sq_dists.raw_dim());
    Zip::from(&mut out)
        .and(sq_dists)
        .for_each(|w, &d| *w = spec.log_weight(d));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn three_four_five() {
        let d = pairwise_sq_dist(array![[0.0, 0.0]].view(), array![[3.0, 4.0]].view()).unwrap();
        assert_eq!(d, array![[25.0]]);
        let d = pairwise_sq_dist(array![[1.0, 2.0]].view(), array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(d, array![[0.0]]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(pairwise_sq_dist(array![[0.0]].view(), array![[0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn matches_naive_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let d = pairwise_sq_dist(a.view(), b.view()).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut naive = 0.0;
                for c in 0..3 {
                    let diff: f64 = a[[i, c]] - b[[j, c]];
                    naive += diff.powi(2);
                }
                assert!((d[[i, j]] - naive).abs() <= 1e-10 * naive.max(1e-300));
            }
        }
    }

    #[test]
    fn log_weight_values() {
        let w = |d: f64, b: f64| log_kernel_weights(&array![[d]], &KernelSpec::rbf(b).unwrap()).unwrap()[[0, 0]];
        assert_eq!(w(0.0, 0.3), 0.0);
        assert_eq!(w(2.0, 1.0), -1.0);
        assert_eq!(w(8.0, 2.0), -1.0);
        assert!(KernelSpec::rbf(0.0).is_err());
        assert!(KernelSpec::rbf(-1.0).is_err());
    }

    fn points(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn scale_folds_into_bandwidth(a in points(3, 2), b in points(4, 2), s in 0.1f64..10.0, b0 in 0.1f64..5.0) {
            let base = log_kernel_weights(&pairwise_sq_dist(a.view(), b.view()).unwrap(), &KernelSpec::rbf(b0).unwrap()).unwrap();
            let scaled = log_kernel_weights(
                &pairwise_sq_dist((&a * s).view(), (&b * s).view()).unwrap(),
                &KernelSpec::rbf(b0 * s).unwrap(),
            ).unwrap();
            for (x, y) in base.iter().zip(scaled.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn symmetric_and_monotone(a in points(3, 2), b in points(2, 2), bw in 0.1f64..5.0, d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
            let spec = KernelSpec::rbf(bw).unwrap();
            let ab = log_kernel_weights(&pairwise_sq_dist(a.view(), b.view()).unwrap(), &spec).unwrap();
            let ba = log_kernel_weights(&pairwise_sq_dist(b.view(), a.view()).unwrap(), &spec).unwrap();
            prop_assert_eq!(ab, ba.t().to_owned());
            if d1 < d2 {
                prop_assert!(spec.log_weight(d1) > spec.log_weight(d2));
            }
        }
    }
}
