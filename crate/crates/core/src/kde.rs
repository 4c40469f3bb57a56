//! The kernel density classifier.
//!
//! At inference the probability of class `k` for a query is the kernel mass
//! of the calibration points labelled `k` divided by the total kernel mass.
//! During projection training the same ratio is formed over per-class
//! background samples, each class sum rescaled by `|class| / m`.
//!
//! All sums are taken in log space and only the final ratio is exponentiated.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::BandwidthLaw;
use crate::dataio::{decode_labels, decode_matrix, encode_labels, encode_matrix, MatrixKind};
use crate::error::{KcalError, Result};
use crate::kernel::{sq_dist, KernelSpec};
use crate::math::logsumexp;
use crate::projection::{Cursor, ProjectionParams};

/// Largest-magnitude natural log whose exponential is still a nonzero f64.
pub const UNDERFLOW_FLOOR: f64 = -745.0;

/// Row-stochastic `n x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-9;
    /// Row-sum slack for probabilities read back from f32 storage.
    pub const STORED_ROW_SUM_TOL: f64 = 1e-5;

    /// Checks that every entry lies in `[0, 1]` and every row sums to 1.
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(KcalError::Validation(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(KcalError::Validation(format!("row {i} sums to {s}")));
            }
        }
        if probs.ncols() == 0 {
            return Err(KcalError::Validation("probability matrix has no columns".into()));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_valid(probs: Array2<f64>) -> Self {
        Self(probs)
    }

    /// Accepts rows that were narrowed to f32 on disk: rows must sum to 1
    /// within [`Self::STORED_ROW_SUM_TOL`] and are then renormalized in f64.
    pub fn from_stored(mut probs: Array2<f64>) -> Result<Self> {
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(KcalError::Validation(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > Self::STORED_ROW_SUM_TOL {
                return Err(KcalError::Validation(format!("row {i} sums to {s}")));
            }
            row.mapv_inplace(|p| p / s);
        }
        Self::new(probs)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.0.ncols();
        &self.0.as_slice().expect("standard layout")[i * k..(i + 1) * k]
    }
}

/// Probabilities plus a per-row flag marking rows that fell back to the
/// class priors because every kernel weight underflowed.
#[derive(Debug, Clone)]
pub struct KdePrediction {
    pub probs: ProbMatrix,
    pub fallback: Vec<bool>,
}

impl KdePrediction {
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

fn class_priors(class_counts: &[usize]) -> Vec<f64> {
    let total: usize = class_counts.iter().sum();
    class_counts
        .iter()
        .map(|&c| c as f64 / total.max(1) as f64)
        .collect()
}

/// Per-class kernel mass for one query, scaled by `exp(-max)` where `max` is
/// the largest single log-weight, which is also returned. Shifting every class
/// by the same amount keeps the final ratio exact when weights tie.
fn class_scaled_mass(
    query: &[f64],
    support: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    coef: f64,
    exclude: Option<usize>,
    scratch: &mut Vec<f64>,
) -> (Vec<f64>, f64) {
    scratch.clear();
    let mut max = f64::NEG_INFINITY;
    for (j, row) in support.rows().into_iter().enumerate() {
        let lw = if Some(j) == exclude {
            f64::NEG_INFINITY
        } else {
            coef * sq_dist(query, row.as_slice().expect("standard layout"))
        };
        scratch.push(lw);
        if lw > max {
            max = lw;
        }
    }
    let mut sums = vec![0.0; num_classes];
    if max > f64::NEG_INFINITY {
        for (&lw, &y) in scratch.iter().zip(labels) {
            sums[y] += (lw - max).exp();
        }
    }
    (sums, max)
}

/// Calibrated KDE probabilities for already-projected queries.
///
/// With `leave_one_out`, query `i` must be support row `i` and is excluded
/// from its own sums. A query whose largest log-weight is below
/// [`UNDERFLOW_FLOOR`] receives the class priors and is flagged.
pub fn kde_probabilities(
    support: ArrayView2<f64>,
    labels: &[usize],
    class_counts: &[usize],
    queries: ArrayView2<f64>,
    spec: &KernelSpec,
    leave_one_out: bool,
) -> Result<KdePrediction> {
    probabilities_with_floor(support, labels, class_counts, queries, spec, leave_one_out, UNDERFLOW_FLOOR)
}

/// As [`kde_probabilities`] but without the underflow fallback: the ratio is
/// formed relative to the largest log-weight, so it stays exact however small
/// the weights get. Only a query with no usable support point at all gets
/// the priors. Bandwidth tuning uses this so that the loss curve does not
/// jump to the prior loss for isolated points at tiny bandwidths.
pub fn kde_probabilities_exact(
    support: ArrayView2<f64>,
    labels: &[usize],
    class_counts: &[usize],
    queries: ArrayView2<f64>,
    spec: &KernelSpec,
    leave_one_out: bool,
) -> Result<KdePrediction> {
    probabilities_with_floor(support, labels, class_counts, queries, spec, leave_one_out, f64::MIN)
}

fn probabilities_with_floor(
    support: ArrayView2<f64>,
    labels: &[usize],
    class_counts: &[usize],
    queries: ArrayView2<f64>,
    spec: &KernelSpec,
    leave_one_out: bool,
    floor: f64,
) -> Result<KdePrediction> {
    spec.validate()?;
    let num_classes = class_counts.len();
    if support.nrows() != labels.len() {
        return Err(KcalError::Argument("support rows and labels differ in length".into()));
    }
    if support.ncols() != queries.ncols() {
        return Err(KcalError::Argument(format!(
            "support has {} columns, queries {}",
            support.ncols(),
            queries.ncols()
        )));
    }
    if leave_one_out && queries.nrows() != support.nrows() {
        return Err(KcalError::Argument(
            "leave-one-out requires the queries to be the support itself".into(),
        ));
    }
    let support = support.as_standard_layout();
    let queries = queries.as_standard_layout();
    let priors = class_priors(class_counts);
    let coef = spec.sq_dist_coefficient();

    let rows: Vec<(Vec<f64>, bool)> = (0..queries.nrows())
        .into_par_iter()
        .map_init(Vec::new, |scratch, i| {
            let q = queries.row(i);
            let exclude = leave_one_out.then_some(i);
            let (mass, max_lw) = class_scaled_mass(
                q.as_slice().expect("standard layout"),
                support.view(),
                labels,
                num_classes,
                coef,
                exclude,
                scratch,
            );
            if !(max_lw >= floor) {
                return (priors.clone(), true);
            }
            let total: f64 = mass.iter().sum();
            (mass.iter().map(|&m| m / total).collect(), false)
        })
        .collect();

    let mut probs = Array2::zeros((rows.len(), num_classes));
    let mut fallback = Vec::with_capacity(rows.len());
    for (mut out, (row, fb)) in probs.rows_mut().into_iter().zip(rows) {
        out.assign(&ndarray::ArrayView1::from(&row[..]));
        fallback.push(fb);
    }
    Ok(KdePrediction {
        probs: ProbMatrix::from_valid(probs),
        fallback,
    })
}

/// Training-time prediction over per-class background samples.
///
/// Row `j`, class `k` is proportional to
/// `(class_sizes[k] / m_k) * sum over background k of the kernel weight`.
pub fn kde_predict_weighted(
    queries: ArrayView2<f64>,
    backgrounds: &[ArrayView2<f64>],
    class_sizes: &[usize],
    spec: &KernelSpec,
) -> Result<ProbMatrix> {
    Ok(ProbMatrix::from_valid(
        weighted_log_probs(queries, backgrounds, class_sizes, spec)?.mapv(f64::exp),
    ))
}

/// Log of [`kde_predict_weighted`]; exact in log space even when a class
/// probability underflows.
pub fn weighted_log_probs(
    queries: ArrayView2<f64>,
    backgrounds: &[ArrayView2<f64>],
    class_sizes: &[usize],
    spec: &KernelSpec,
) -> Result<Array2<f64>> {
    spec.validate()?;
    if backgrounds.len() != class_sizes.len() {
        return Err(KcalError::Argument("one class size per background set required".into()));
    }
    if let Some(k) = backgrounds.iter().position(|b| b.nrows() == 0) {
        return Err(KcalError::Argument(format!("background set for class {k} is empty")));
    }
    if backgrounds.iter().any(|b| b.ncols() != queries.ncols()) {
        return Err(KcalError::Argument("background and query dimensions differ".into()));
    }
    let coef = spec.sq_dist_coefficient();
    let mut out = Array2::zeros((queries.nrows(), backgrounds.len()));
    for (q, mut out_row) in queries.rows().into_iter().zip(out.rows_mut()) {
        let q = q.to_vec();
        for (k, bg) in backgrounds.iter().enumerate() {
            let log_scale = (class_sizes[k] as f64 / bg.nrows() as f64).ln();
            let lse = logsumexp(bg.rows().into_iter().map(|r| coef * sq_dist(&q, &r.to_vec())));
            out_row[k] = log_scale + lse;
        }
        let total = logsumexp(out_row.iter().copied());
        if total == f64::NEG_INFINITY {
            return Err(KcalError::Argument("every class has zero weight".into()));
        }
        out_row.mapv_inplace(|v| v - total);
    }
    Ok(out)
}

/// A deployable calibrated classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    /// Projected calibration embeddings, held at f32 precision.
    pub support: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub bandwidth: f64,
    pub projection: ProjectionParams,
    pub meta: ModelMeta,
}

/// Tuning provenance stored alongside the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub leave_one_out: bool,
    pub bandwidth_source: String,
    #[serde(default)]
    pub bandwidth_law: Option<BandwidthLaw>,
    #[serde(default)]
    pub empty_classes: Vec<usize>,
    #[serde(default)]
    pub selection: Option<crate::bandwidth::BandwidthSelection>,
}

/// Narrows every entry to f32 and back.
pub fn round_to_f32(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v as f32 as f64)
}

impl KdeModel {
    /// Projects the calibration embeddings and builds a model with the given bandwidth.
    pub fn from_calibration(
        projection: ProjectionParams,
        embeddings: ArrayView2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        bandwidth: f64,
    ) -> Result<Self> {
        let support = round_to_f32(&projection.project(embeddings)?);
        Self::new(support, labels, num_classes, bandwidth, projection)
    }

    pub fn new(
        support: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        bandwidth: f64,
        projection: ProjectionParams,
    ) -> Result<Self> {
        KernelSpec::rbf(bandwidth)?;
        if support.nrows() != labels.len() {
            return Err(KcalError::Validation("support rows and labels differ".into()));
        }
        if support.ncols() != projection.output_dim {
            return Err(KcalError::Validation("support dimension differs from projection".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(KcalError::Validation(format!("label {bad} out of range")));
        }
        let class_counts = crate::dataio::class_partition(&labels, num_classes).counts;
        let empty_classes = class_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(k, _)| k)
            .collect();
        Ok(Self {
            support,
            labels,
            class_counts,
            bandwidth,
            projection,
            meta: ModelMeta {
                empty_classes,
                ..ModelMeta::default()
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Result<Self> {
        KernelSpec::rbf(bandwidth)?;
        self.bandwidth = bandwidth;
        Ok(self)
    }

    /// Calibrated probabilities for raw (unprojected) queries.
    pub fn predict(&self, queries: ArrayView2<f64>, leave_one_out: bool) -> Result<KdePrediction> {
        let z = self.projection.project(queries)?;
        self.predict_projected(z.view(), leave_one_out)
    }

    pub fn predict_projected(&self, z: ArrayView2<f64>, leave_one_out: bool) -> Result<KdePrediction> {
        kde_probabilities(
            self.support.view(),
            &self.labels,
            &self.class_counts,
            z,
            &KernelSpec::rbf(self.bandwidth)?,
            leave_one_out,
        )
    }

    /// A new model with extra calibration points appended.
    pub fn extended(&self, embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<Self> {
        let extra = round_to_f32(&self.projection.project(embeddings)?);
        let mut support = self.support.clone();
        support
            .append(Axis(0), extra.view())
            .map_err(|e| KcalError::Argument(e.to_string()))?;
        let mut all = self.labels.clone();
        all.extend_from_slice(labels);
        let mut model = Self::new(support, all, self.num_classes(), self.bandwidth, self.projection.clone())?;
        model.meta = ModelMeta {
            empty_classes: model.meta.empty_classes,
            ..self.meta.clone()
        };
        Ok(model)
    }

    /// `KCAL | version u32 | json_len u32 | json | KPRJ block | KEMB support | KLAB labels`,
    /// each block prefixed by its u64 byte length.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = ModelManifest {
            bandwidth: self.bandwidth,
            num_classes: self.num_classes(),
            class_counts: self.class_counts.clone(),
            support_size: self.labels.len(),
            dim: self.support.ncols(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| KcalError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(b"KCAL");
        out.extend_from_slice(&crate::dataio::FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for block in [
            self.projection.to_bytes()?,
            encode_matrix(MatrixKind::Embeddings, &self.support)?,
            encode_labels(&self.labels, self.num_classes())?,
        ] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            out.extend_from_slice(&block);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != b"KCAL" {
            return Err(KcalError::Format("bad model magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != crate::dataio::FORMAT_VERSION {
            return Err(KcalError::Format(format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let manifest: ModelManifest = serde_json::from_slice(cur.take(json_len)?)
            .map_err(|e| KcalError::Format(format!("model manifest: {e}")))?;
        let mut block = || -> Result<&[u8]> {
            let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            cur.take(len)
        };
        let projection = ProjectionParams::from_bytes(block()?)?;
        let support = decode_matrix(MatrixKind::Embeddings, block()?)?;
        let (labels, _) = decode_labels(block()?)?;
        let mut model = Self::new(support, labels, manifest.num_classes, manifest.bandwidth, projection)?;
        if model.class_counts != manifest.class_counts {
            return Err(KcalError::Format("manifest class counts disagree with labels".into()));
        }
        model.meta = manifest.meta;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    bandwidth: f64,
    num_classes: usize,
    class_counts: Vec<usize>,
    support_size: usize,
    dim: usize,
    meta: ModelMeta,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::Arch;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn predict(support: &Array2<f64>, labels: &[usize], k: usize, q: &Array2<f64>, b: f64, loo: bool) -> KdePrediction {
        let counts = crate::dataio::class_partition(labels, k).counts;
        kde_probabilities(support.view(), labels, &counts, q.view(), &KernelSpec::rbf(b).unwrap(), loo).unwrap()
    }

    /// Direct exponentials, no log-space tricks.
    fn naive(support: &Array2<f64>, labels: &[usize], k: usize, q: &Array2<f64>, b: f64) -> Array2<f64> {
        let mut out = Array2::zeros((q.nrows(), k));
        for i in 0..q.nrows() {
            let mut per = vec![0.0; k];
            for j in 0..support.nrows() {
                let d2: f64 = (0..q.ncols()).map(|c| (q[[i, c]] - support[[j, c]]).powi(2)).sum();
                per[labels[j]] += (-d2 / (2.0 * b * b)).exp();
            }
            let tot: f64 = per.iter().sum();
            for c in 0..k {
                out[[i, c]] = per[c] / tot;
            }
        }
        out
    }

    #[test]
    fn two_point_example() {
        let p = predict(&array![[0.0], [10.0]], &[0, 1], 2, &array![[0.0]], 1.0, false);
        let e = (-50.0f64).exp();
        assert!((p.probs.row(0)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.probs.row(0)[1] - e / (1.0 + e)).abs() < 1e-30);
        assert!((p.probs.row(0)[1] - 1.9287e-22).abs() < 1e-25);
    }

    #[test]
    fn equidistant_support_gives_priors() {
        let support = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let p = predict(&support, &[0, 1, 1, 1], 2, &array![[0.0, 0.0]], 0.7, false);
        assert_eq!(p.probs.row(0), &[0.25, 0.75]);
    }

    #[test]
    fn underflow_falls_back_to_priors() {
        let support = array![[0.0], [1.0], [2.0]];
        let p = predict(&support, &[0, 1, 1], 2, &array![[1000.0]], 1.0, false);
        assert!(p.fallback[0]);
        assert_eq!(p.probs.row(0), &[1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(p.fallback_count(), 1);
    }

    #[test]
    fn loo_singleton_class_gets_zero() {
        let support = array![[0.0], [0.5], [0.7]];
        let p = predict(&support, &[0, 1, 1], 2, &support, 1.0, true);
        assert_eq!(p.probs.row(0), &[0.0, 1.0]);
        assert!(p.probs.row(1)[0] > 0.0);
        assert!(kde_probabilities(
            support.view(),
            &[0, 1, 1],
            &[1, 2],
            array![[0.0]].view(),
            &KernelSpec::rbf(1.0).unwrap(),
            true
        )
        .is_err());
    }

    #[test]
    fn matches_naive_on_small_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(1..=50);
            let k = rng.random_range(2..5);
            let support = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let q = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let b = rng.random_range(0.3..3.0);
            let fast = predict(&support, &labels, k, &q, b, false);
            let slow = naive(&support, &labels, k, &q, b);
            for (a, e) in fast.probs.as_array().iter().zip(slow.iter()) {
                assert!((a - e).abs() <= 1e-10 * e.abs().max(1e-300) || (a - e).abs() < 1e-300);
            }
        }
    }

    #[test]
    fn weighted_hand_evaluation() {
        let q = array![[0.0]];
        let bg0 = array![[1.0]];
        let bg1 = array![[2.0]];
        let p = kde_predict_weighted(q.view(), &[bg0.view(), bg1.view()], &[10, 20], &KernelSpec::rbf(1.0).unwrap()).unwrap();
        let (w1, w2) = ((-0.5f64).exp(), (-2.0f64).exp());
        let norm = 10.0 * w1 + 20.0 * w2;
        assert!((p.row(0)[0] - 10.0 * w1 / norm).abs() < 1e-15);
        assert!((p.row(0)[1] - 20.0 * w2 / norm).abs() < 1e-15);
    }

    #[test]
    fn weighted_coincident_backgrounds() {
        let q = array![[0.3, 0.3]];
        let bg0 = array![[0.3, 0.3], [0.3, 0.3]];
        let bg1 = array![[0.3, 0.3]];
        let p = kde_predict_weighted(q.view(), &[bg0.view(), bg1.view()], &[5, 15], &KernelSpec::rbf(0.5).unwrap()).unwrap();
        assert!((p.row(0)[0] - 0.25).abs() < 1e-15);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(kde_predict_weighted(q.view(), &[bg0.view(), empty.view()], &[5, 15], &KernelSpec::rbf(0.5).unwrap()).is_err());
    }

    #[test]
    fn weighted_equal_sizes_equals_pooled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bgs: Vec<Array2<f64>> = (0..3).map(|_| Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0))).collect();
        let q = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let views: Vec<_> = bgs.iter().map(|b| b.view()).collect();
        let w = kde_predict_weighted(q.view(), &views, &[40, 40, 40], &KernelSpec::rbf(0.8).unwrap()).unwrap();
        let pooled = ndarray::concatenate(Axis(0), &views).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let p = predict(&pooled, &labels, 3, &q, 0.8, false);
        for (a, b) in w.as_array().iter().zip(p.probs.as_array().iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((30, 4), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut proj = ProjectionParams::init(4, 2, Arch::Mlp2Skip, 1).unwrap();
        proj.freeze_normalization(x.view()).unwrap();
        let proj = ProjectionParams::from_bytes(&proj.to_bytes().unwrap()).unwrap();
        let model = KdeModel::from_calibration(proj, x.view(), labels, 3, 0.37).unwrap();
        let back = KdeModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        assert_eq!(model, back);
        let a = model.predict(x.view(), true).unwrap();
        let b = back.predict(x.view(), true).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn extending_creates_a_new_model() {
        let proj = ProjectionParams::init(1, 1, Arch::Identity, 0).unwrap();
        let m = KdeModel::from_calibration(proj, array![[0.0], [1.0]].view(), vec![0, 1], 2, 1.0).unwrap();
        let m2 = m.extended(array![[2.0]].view(), &[1]).unwrap();
        assert_eq!(m.class_counts, vec![1, 1]);
        assert_eq!(m2.class_counts, vec![1, 2]);
    }

    fn instance() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, Array2<f64>, f64)> {
        (1usize..20, 2usize..5).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(-3.0f64..3.0, n * 2),
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(-4.0f64..4.0, 6),
                0.05f64..5.0,
            )
                .prop_map(move |(s, l, q, b)| {
                    (
                        Array2::from_shape_vec((n, 2), s).unwrap(),
                        l,
                        Array2::from_shape_vec((3, 2), q).unwrap(),
                        b,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn rows_on_simplex((support, labels, q, b) in instance()) {
            let k = labels.iter().max().unwrap() + 1;
            let p = predict(&support, &labels, k.max(2), &q, b, false);
            for i in 0..q.nrows() {
                let row = p.probs.row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn permutation_and_scale_invariant((support, labels, q, b) in instance(), s in 0.2f64..5.0) {
            let k = labels.iter().max().unwrap() + 1;
            let base = predict(&support, &labels, k, &q, b, false);
            let n = labels.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let ps = support.select(Axis(0), &perm);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let permuted = predict(&ps, &pl, k, &q, b, false);
            let scaled = predict(&(&support * s), &labels, k, &(&q * s), b * s, false);
            for ((a, c), d) in base.probs.as_array().iter().zip(permuted.probs.as_array().iter()).zip(scaled.probs.as_array().iter()) {
                prop_assert!((a - c).abs() <= 1e-12);
                prop_assert!((a - d).abs() <= 1e-12 || base.fallback.iter().any(|&f| f));
            }
        }
    }

    #[test]
    fn stored_probabilities_renormalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let raw = Array2::from_shape_fn((50, 7), |_| rng.random_range(0.0..1.0));
        let sums = raw.sum_axis(ndarray::Axis(1));
        let probs = &raw / &sums.insert_axis(ndarray::Axis(1));
        let stored = round_to_f32(&probs);
        let p = ProbMatrix::from_stored(stored).unwrap();
        for i in 0..50 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= ProbMatrix::ROW_SUM_TOL);
        }
        assert!(ProbMatrix::from_stored(array![[0.5, 0.49]]).is_err());
        assert!(ProbMatrix::from_stored(array![[1.5, -0.5]]).is_err());
    }
}
