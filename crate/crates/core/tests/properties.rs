//! Cross-module invariants as property tests.

use kcal::bandwidth::{fit_bandwidth_constant, golden_section_minimize, BandwidthLaw};
use kcal::dataio::{class_partition, decode_matrix, encode_matrix, split_indices, MatrixKind};
use kcal::kde::ProbMatrix;
use kcal::metrics::{
    brier_multi, brier_top, cece, ece, evaluate, nll, reliability_data, BinningScheme, ReliabilityAxis, ThresholdRule,
};
use kcal::projection::{Arch, ProjectionParams};
use kcal::synth::{make_oracle, oracle_posterior, GmmOracle};
use kcal::temperature::{apply_temperature, fit_temperature, softmax, temperature_nll, TemperatureModel};
use kcal::trainer::sample_batch;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(lo..hi, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

/// Probabilities from random logits, with labels.
fn scored() -> impl Strategy<Value = (ProbMatrix, Vec<usize>)> {
    (1usize..120, 2usize..6, 0.1f64..8.0).prop_flat_map(|(n, k, sharp)| {
        (
            proptest::collection::vec(-1.0f64..1.0, n * k),
            proptest::collection::vec(0..k, n),
        )
            .prop_map(move |(raw, labels)| {
                let logits = Array2::from_shape_vec((n, k), raw).unwrap() * sharp;
                (softmax(logits.view()), labels)
            })
    })
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_round_trip_is_bitwise(m in matrix(0..20, 1..6, -1e6, 1e6)) {
        let narrowed = m.mapv(|v| v as f32 as f64);
        let bytes = encode_matrix(MatrixKind::Embeddings, &narrowed).unwrap();
        let back = decode_matrix(MatrixKind::Embeddings, &bytes).unwrap();
        prop_assert_eq!(back.dim(), narrowed.dim());
        for (a, b) in back.iter().zip(narrowed.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(encode_matrix(MatrixKind::Embeddings, &back).unwrap(), bytes);
    }

    #[test]
    fn split_partitions_indices(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (a, b) = split_indices(n, frac, seed).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn class_partition_matches_histogram(labels in proptest::collection::vec(0usize..7, 0..200)) {
        let p = class_partition(&labels, 7);
        for k in 0..7 {
            prop_assert_eq!(p.counts[k], labels.iter().filter(|&&y| y == k).count());
            prop_assert!(p.per_class[k].iter().all(|&i| labels[i] == k));
        }
    }

    #[test]
    fn forward_is_deterministic(x in matrix(1..10, 3..4, -3.0, 3.0), seed in any::<u64>()) {
        let p = ProjectionParams::init(3, 2, Arch::Mlp2Skip, seed).unwrap();
        let a = p.project(x.view()).unwrap();
        let b = p.project(x.view()).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn linear_is_mlp_without_nonlinear_path(x in matrix(2..10, 4..5, -3.0, 3.0), seed in any::<u64>()) {
        let mut lin = ProjectionParams::init(4, 3, Arch::Linear, seed).unwrap();
        lin.freeze_normalization(x.view()).unwrap();
        let mut mlp = ProjectionParams::init(4, 3, Arch::Mlp2Skip, seed ^ 1).unwrap();
        mlp.norm_mean = lin.norm_mean.clone();
        mlp.norm_var = lin.norm_var.clone();
        mlp.w2.fill(0.0);
        mlp.ws = lin.w1.clone();
        mlp.b2 = lin.b1.clone();
        let a = lin.project(x.view()).unwrap();
        let b = mlp.project(x.view()).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn golden_section_finds_unimodal_minimum(c in -3.0f64..3.0, a in 0.1f64..5.0, kink in 0.0f64..2.0) {
        let f = |t: f64| a * (t - c).powi(2) + kink * (t - c).abs();
        let (lb, ub, tol) = (1e-3f64.ln(), 1e3f64.ln(), 1e-4);
        let min = golden_section_minimize(f, lb, ub, tol).unwrap();
        prop_assert!((min.x - c).abs() <= tol, "t {} vs {}", min.x, c);
    }

    #[test]
    fn law_fit_is_scale_consistent(
        pairs in proptest::collection::vec((1usize..5000, 0.01f64..10.0), 2..8),
        s in 0.01f64..100.0,
        dim in 1usize..40,
    ) {
        let base = fit_bandwidth_constant(&pairs, dim).unwrap();
        let scaled_pairs: Vec<(usize, f64)> = pairs.iter().map(|&(m, b)| (m, b * s)).collect();
        let scaled = fit_bandwidth_constant(&scaled_pairs, dim).unwrap();
        prop_assert!((scaled.constant / (base.constant * s) - 1.0).abs() <= 1e-12);
        prop_assert!((scaled.residual_rms - base.residual_rms).abs() <= 1e-9);
    }

    #[test]
    fn law_shrinks_with_m(c in 0.01f64..10.0, dim in 1usize..40, m in 1usize..100_000) {
        let law = BandwidthLaw { constant: c, dim, residual_rms: 0.0 };
        prop_assert!(law.bandwidth(m + 1) < law.bandwidth(m));
    }

    #[test]
    fn metrics_are_permutation_invariant((probs, labels) in scored(), seed in any::<u64>()) {
        let n = labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = ProbMatrix::new(probs.as_array().select(Axis(0), &perm)).unwrap();
        let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for scheme in [BinningScheme::adaptive(7), BinningScheme::fixed_width(7)] {
            let a = evaluate(&probs, &labels, scheme, ThresholdRule::Absolute(0.0)).unwrap();
            let b = evaluate(&shuffled, &shuffled_labels, scheme, ThresholdRule::Absolute(0.0)).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            for (x, y) in [(a.ece, b.ece), (a.cece, b.cece), (a.brier_top, b.brier_top),
                           (a.brier_multi, b.brier_multi), (a.nll, b.nll)] {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn metric_bounds((probs, labels) in scored()) {
        let k = probs.num_classes() as f64;
        prop_assert!(brier_top(&probs, &labels).unwrap() <= 1.0);
        prop_assert!(brier_multi(&probs, &labels).unwrap() <= 2.0 / k + 1e-15);
        prop_assert!(nll(&probs, &labels).unwrap() >= 0.0);
        let scheme = BinningScheme::default();
        let e = ece(&probs, &labels, scheme).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let c = cece(&probs, &labels, scheme, ThresholdRule::Absolute(0.0)).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn ece_is_the_weighted_reliability_gap((probs, labels) in scored(), bins in 1usize..25, adaptive in any::<bool>()) {
        let scheme = if adaptive { BinningScheme::adaptive(bins) } else { BinningScheme::fixed_width(bins) };
        let rel = reliability_data(&probs, &labels, ReliabilityAxis::Confidence, scheme, 0).unwrap();
        prop_assert_eq!(rel.weighted_gap(), ece(&probs, &labels, scheme).unwrap());
    }

    #[test]
    fn temperature_preserves_argmax(logits in matrix(1..30, 2..6, -20.0, 20.0), t in 0.05f64..20.0) {
        let probs = apply_temperature(&TemperatureModel { temperature: t, at_search_bound: false }, logits.view());
        for (l, p) in logits.rows().into_iter().zip(0..) {
            prop_assert_eq!(argmax(l.as_slice().unwrap()), argmax(probs.row(p)));
        }
    }

    #[test]
    fn fitted_temperature_never_worsens_nll(logits in matrix(5..80, 2..5, -6.0, 6.0), seed in any::<u64>()) {
        let k = logits.ncols();
        let labels: Vec<usize> = (0..logits.nrows()).map(|i| (i as u64 ^ seed) as usize % k).collect();
        let model = fit_temperature(logits.view(), &labels).unwrap();
        prop_assert!(model.temperature > 0.0);
        let at_fit = temperature_nll(logits.view(), &labels, model.temperature);
        let at_one = temperature_nll(logits.view(), &labels, 1.0);
        prop_assert!(at_fit <= at_one + 1e-12, "{} > {}", at_fit, at_one);
    }

    #[test]
    fn oracle_posterior_rows_on_simplex(seed in any::<u64>(), k in 2usize..5, sep in 0.0f64..6.0) {
        let oracle = make_oracle(k, 3, sep, 1.0, &vec![1.0 / k as f64; k], seed).unwrap();
        let x = oracle.sample(50, seed ^ 7).unwrap().embeddings;
        let post = oracle_posterior(&oracle, x.view()).unwrap();
        for i in 0..post.nrows() {
            let row = post.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn coincident_means_recover_priors(raw in proptest::collection::vec(0.05f64..1.0, 2..6), x in matrix(1..10, 2..3, -5.0, 5.0)) {
        let total: f64 = raw.iter().sum();
        let priors: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let k = priors.len();
        let oracle = GmmOracle { means: vec![vec![0.0; 2]; k], sigma: 1.0, priors: priors.clone(), seed: 0 };
        let post = oracle_posterior(&oracle, x.view()).unwrap();
        for i in 0..post.nrows() {
            for (p, q) in post.row(i).iter().zip(&priors) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batches_respect_the_sampling_contract(
        labels in proptest::collection::vec(0usize..4, 8..120),
        batch_size in 0usize..8,
        m in 1usize..6,
        seed in any::<u64>(),
    ) {
        let part = class_partition(&labels, 4);
        prop_assume!(part.counts.iter().all(|&c| c > 0));
        let batch = sample_batch(&part, batch_size, m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batch.prediction.len(), batch_size.min(labels.len()));
        let mut seen = batch.prediction.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), batch.prediction.len());
        for (k, bg) in batch.background.iter().enumerate() {
            prop_assert_eq!(bg.len(), m);
            prop_assert!(bg.iter().all(|&i| labels[i] == k));
            let outside = part.per_class[k].iter().filter(|i| !batch.prediction.contains(i)).count();
            if outside > 0 {
                prop_assert!(bg.iter().all(|i| !batch.prediction.contains(i)));
                prop_assert_eq!(batch.class_sizes[k], outside);
            } else {
                prop_assert_eq!(batch.class_sizes[k], part.counts[k]);
            }
        }
    }
}

#[test]
fn temperature_limits() {
    let logits = ndarray::array![[2.0, -1.0, 0.5], [0.0, 3.0, -2.0]];
    let one = apply_temperature(&TemperatureModel { temperature: 1.0, at_search_bound: false }, logits.view());
    assert_eq!(one.as_array(), softmax(logits.view()).as_array());
    let hot = apply_temperature(&TemperatureModel { temperature: 1e6, at_search_bound: false }, logits.view());
    assert!(hot.as_array().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-4));
}
