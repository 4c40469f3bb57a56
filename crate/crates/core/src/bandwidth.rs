//! Inference bandwidth selection.
//!
//! The bandwidth is chosen by golden-section search over the calibration
//! log-loss in `log b`. Alternatively it is computed from the shrinkage law
//! `b = C * m^(-1/(d+4))`, where `m` is the rarest class count and `C` is fit
//! from previously tuned `(m, b*)` pairs.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{KcalError, Result};
use crate::kde::kde_probabilities_exact;
use crate::kernel::{sq_dist, KernelSpec};

/// Lower clamp on probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const INV_PHI: f64 = 0.618_033_988_749_894_9;
const SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub iterations: usize,
}

/// Upper bound on the iterations [`golden_section_minimize`] performs.
pub fn golden_section_max_iterations(lb: f64, ub: f64, tol: f64) -> usize {
    (((ub - lb) / tol).ln() / (1.0 / INV_PHI).ln()).ceil().max(0.0) as usize
}

/// Golden-section search for the minimum of a unimodal `f` on `[lb, ub]`.
///
/// Stops once the bracket is no wider than `tol` (absolute, in the units of
/// `x`). Any non-finite evaluation aborts the search.
pub fn golden_section_minimize(
    mut f: impl FnMut(f64) -> f64,
    lb: f64,
    ub: f64,
    tol: f64,
) -> Result<Minimum> {
    if !(lb < ub) || !lb.is_finite() || !ub.is_finite() {
        return Err(KcalError::Argument(format!("invalid bracket [{lb}, {ub}]")));
    }
    if !(tol > 0.0) {
        return Err(KcalError::Argument(format!("tolerance must be positive, got {tol}")));
    }
    let mut eval = |x: f64| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(KcalError::NonFiniteObjective { at: x, value: v })
        }
    };

    let (mut a, mut b) = (lb, ub);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    let mut iterations = 0;
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = eval(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = eval(x2)?;
        }
        iterations += 1;
    }
    let (x, value) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    Ok(Minimum {
        x,
        value,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSearchConfig {
    /// Lower bound on `b`; derived from the support when `None`.
    pub lb: Option<f64>,
    pub ub: Option<f64>,
    /// Tolerance on `log b`, i.e. relative tolerance on `b`.
    pub tol: f64,
    pub loo: bool,
}

impl Default for BandwidthSearchConfig {
    fn default() -> Self {
        Self {
            lb: None,
            ub: None,
            tol: 1e-3,
            loo: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub bandwidth: f64,
    pub loss: f64,
    pub lb: f64,
    pub ub: f64,
    pub iterations: usize,
    /// The minimizer sits on an edge of the bracket. At the lower edge this
    /// usually means the leave-one-out classifier separates the calibration
    /// set perfectly, so the loss keeps falling as `b` shrinks.
    pub at_bound: bool,
}

/// Root-mean-square pairwise distance over an evenly strided subsample of at
/// most 1000 rows.
pub fn rms_pairwise_distance(points: ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 0.0;
    }
    let stride = n.div_ceil(SUBSAMPLE);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let sub = points.select(Axis(0), &idx).as_standard_layout().to_owned();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sub.nrows() {
        for j in (i + 1)..sub.nrows() {
            total += sq_dist(sub.row(i).as_slice().unwrap(), sub.row(j).as_slice().unwrap());
            pairs += 1;
        }
    }
    (total / pairs.max(1) as f64).sqrt()
}

/// Default search bracket `[1e-3 s, 1e3 s]` with `s` the RMS pairwise distance.
pub fn default_bounds(support: ArrayView2<f64>) -> (f64, f64) {
    let s = rms_pairwise_distance(support);
    let s = if s > 0.0 && s.is_finite() { s } else { 1.0 };
    (1e-3 * s, 1e3 * s)
}

/// Mean negative log-likelihood of the KDE classifier at bandwidth `b`,
/// with probabilities clamped below at 1e-12. No underflow fallback is
/// applied, see [`kde_probabilities_exact`].
pub fn calibration_log_loss(
    support: ArrayView2<f64>,
    labels: &[usize],
    class_counts: &[usize],
    queries: ArrayView2<f64>,
    query_labels: &[usize],
    bandwidth: f64,
    leave_one_out: bool,
) -> Result<f64> {
    let pred = kde_probabilities_exact(
        support,
        labels,
        class_counts,
        queries,
        &KernelSpec::rbf(bandwidth)?,
        leave_one_out,
    )?;
    let n = query_labels.len();
    if n == 0 {
        return Err(KcalError::Argument("no queries to evaluate the loss on".into()));
    }
    let total: f64 = query_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -pred.probs.row(i)[y].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

/// Golden-section bandwidth search on the calibration set, using the
/// support points themselves as queries.
pub fn tune_bandwidth(
    support: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    config: &BandwidthSearchConfig,
) -> Result<BandwidthSelection> {
    tune_bandwidth_with_queries(support, labels, num_classes, support, config)
}

/// As [`tune_bandwidth`], with the query projections supplied separately.
///
/// `queries` must be row-aligned with `support` (same points and labels);
/// this lets callers evaluate the loss on unrounded projections against a
/// support stored at reduced precision.
pub fn tune_bandwidth_with_queries(
    support: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    queries: ArrayView2<f64>,
    config: &BandwidthSearchConfig,
) -> Result<BandwidthSelection> {
    if queries.nrows() != support.nrows() {
        return Err(KcalError::Argument("queries must align with the support".into()));
    }
    let counts = crate::dataio::class_partition(labels, num_classes).counts;
    if config.loo {
        let singletons: Vec<usize> = (0..num_classes).filter(|&k| counts[k] == 1).collect();
        if !singletons.is_empty() {
            log::warn!("classes {singletons:?} have a single calibration point; leave-one-out excludes its own class weight");
        }
    }
    let (dlb, dub) = default_bounds(support);
    let lb = config.lb.unwrap_or(dlb);
    let ub = config.ub.unwrap_or(dub);
    if !(lb > 0.0 && lb < ub) {
        return Err(KcalError::Argument(format!("invalid bandwidth bracket [{lb}, {ub}]")));
    }
    let mut failure = None;
    let min = golden_section_minimize(
        |log_b| match calibration_log_loss(support, labels, &counts, queries, labels, log_b.exp(), config.loo) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        lb.ln(),
        ub.ln(),
        config.tol,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let min = min.map_err(|e| match e {
        KcalError::NonFiniteObjective { at, value } => KcalError::NonFiniteObjective { at: at.exp(), value },
        other => other,
    })?;
    let at_bound = min.x - lb.ln() <= 2.0 * config.tol || ub.ln() - min.x <= 2.0 * config.tol;
    if at_bound {
        log::warn!("selected bandwidth {} is at the search bound [{lb}, {ub}]", min.x.exp());
    }
    Ok(BandwidthSelection {
        bandwidth: min.x.exp(),
        at_bound,
        loss: min.value,
        lb,
        ub,
        iterations: min.iterations,
    })
}

/// `n` log-spaced values from `lb` to `ub` inclusive.
pub fn log_grid(lb: f64, ub: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lb];
    }
    let (a, b) = (lb.ln(), ub.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Number of local minima of a sampled curve, treating steps no larger than
/// `noise` as flat. Endpoints count when the curve rises away from them.
pub fn count_local_minima(values: &[f64], noise: f64) -> usize {
    let signs: Vec<i8> = values
        .windows(2)
        .filter_map(|w| {
            let d = w[1] - w[0];
            if d > noise {
                Some(1)
            } else if d < -noise {
                Some(-1)
            } else {
                None
            }
        })
        .collect();
    if signs.is_empty() {
        return 1;
    }
    let interior = signs.windows(2).filter(|w| w[0] < 0 && w[1] > 0).count();
    interior + usize::from(signs[0] > 0) + usize::from(*signs.last().unwrap() < 0)
}

/// Fitted shrinkage law `b = constant * m^(-1/(dim+4))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthLaw {
    pub constant: f64,
    pub dim: usize,
    /// RMS of the residuals in `log b`.
    pub residual_rms: f64,
}

impl BandwidthLaw {
    pub fn exponent(dim: usize) -> f64 {
        -1.0 / (dim as f64 + 4.0)
    }

    pub fn bandwidth(&self, m: usize) -> f64 {
        analytic_bandwidth(self, m)
    }
}

/// `constant * m^(-1/(d+4))`.
pub fn analytic_bandwidth(law: &BandwidthLaw, m: usize) -> f64 {
    law.constant * (m.max(1) as f64).powf(BandwidthLaw::exponent(law.dim))
}

/// Least-squares intercept of `log b = log C - log(m) / (d + 4)` with the slope fixed.
pub fn fit_bandwidth_constant(pairs: &[(usize, f64)], dim: usize) -> Result<BandwidthLaw> {
    if pairs.len() < 2 {
        return Err(KcalError::Argument(format!(
            "need at least 2 (m, b) pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|&(m, b)| m == 0 || !(b > 0.0) || !b.is_finite()) {
        return Err(KcalError::Argument("pairs must be positive".into()));
    }
    let slope = BandwidthLaw::exponent(dim);
    let intercepts: Vec<f64> = pairs
        .iter()
        .map(|&(m, b)| b.ln() - slope * (m as f64).ln())
        .collect();
    let log_c = intercepts.iter().sum::<f64>() / intercepts.len() as f64;
    let residual_rms = (intercepts.iter().map(|v| (v - log_c).powi(2)).sum::<f64>()
        / intercepts.len() as f64)
        .sqrt();
    Ok(BandwidthLaw {
        constant: log_c.exp(),
        dim,
        residual_rms,
    })
}
