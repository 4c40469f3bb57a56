//! Stochastic training of the projection on the KDE log-loss.
//!
//! Each batch draws `B` prediction points and, for every class, `m`
//! background points from the rest of that class. A prediction's class score
//! is the background kernel mass rescaled by `|D^k \ D^B| / m`, which keeps the
//! estimate of the full-class mass unbiased. The bandwidth is fixed at 1
//! during training; its scale is absorbed by the projection.

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandwidth::PROB_FLOOR;
use crate::dataio::{ClassPartition, EmbeddingDataset};
use crate::error::{KcalError, Result};
use crate::kernel::sq_dist;
use crate::math::logsumexp;
use crate::projection::{default_output_dim, Arch, InputKind, ProjectionGrads, ProjectionParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub background_per_class: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub arch: Arch,
    pub input_kind: InputKind,
    /// `None` means `min(h, 32)`.
    pub output_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            background_per_class: 20,
            learning_rate: 1e-3,
            epochs: 100,
            batches_per_epoch: 200,
            plateau_patience: 10,
            plateau_factor: 0.5,
            seed: 0,
            arch: Arch::Mlp2Skip,
            input_kind: InputKind::Embeddings,
            output_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.background_per_class == 0 {
            return Err(KcalError::Argument("batch size and background size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KcalError::Argument(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(KcalError::Argument(format!(
                "plateau factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub learning_rates: Vec<f64>,
    pub seed: u64,
    /// Batches where some class had to be sampled with replacement.
    pub sampling_warnings: usize,
    #[serde(skip)]
    pub params: ProjectionParams,
}

/// Indices for one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub prediction: Vec<usize>,
    pub background: Vec<Vec<usize>>,
    /// `|D^k \ D^B|`, or `|D^k|` when the prediction set exhausted class `k`.
    pub class_sizes: Vec<usize>,
    pub with_replacement: bool,
}

/// Draws a batch. Predictions are uniform without replacement over all rows;
/// backgrounds are uniform without replacement over each class minus the
/// predictions. A class with fewer than `m` such rows is sampled with
/// replacement and the batch is flagged.
pub fn sample_batch(partition: &ClassPartition, batch_size: usize, m: usize, rng: &mut impl Rng) -> Result<Batch> {
    let n = partition.total();
    if batch_size > n {
        return Err(KcalError::Argument(format!("batch size {batch_size} exceeds {n} rows")));
    }
    if m == 0 {
        return Err(KcalError::Argument("background size must be >= 1".into()));
    }
    if let Some(k) = partition.counts.iter().position(|&c| c == 0) {
        return Err(KcalError::Validation(format!("class {k} has no training rows")));
    }
    // The partition covers rows 0..n of its dataset.
    let prediction: Vec<usize> = index::sample(rng, n, batch_size).into_vec();
    let mut in_batch = vec![false; n];
    for &i in &prediction {
        in_batch[i] = true;
    }

    let mut background = Vec::with_capacity(partition.num_classes());
    let mut class_sizes = Vec::with_capacity(partition.num_classes());
    let mut with_replacement = false;
    for members in &partition.per_class {
        let rest: Vec<usize> = members.iter().copied().filter(|&i| !in_batch[i]).collect();
        let pool = if rest.is_empty() { members.clone() } else { rest };
        let size = pool.len();
        let chosen: Vec<usize> = if pool.len() >= m {
            index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect()
        } else {
            with_replacement = true;
            (0..m).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        background.push(chosen);
        class_sizes.push(size);
    }
    if with_replacement {
        log::warn!("a class had fewer than {m} background rows; sampled with replacement");
    }
    Ok(Batch {
        prediction,
        background,
        class_sizes,
        with_replacement,
    })
}

/// Rows to project for a batch: predictions first, then each background set.
fn batch_rows(batch: &Batch) -> Vec<usize> {
    batch
        .prediction
        .iter()
        .chain(batch.background.iter().flatten())
        .copied()
        .collect()
}

fn gather(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (mut o, &r) in out.rows_mut().into_iter().zip(rows) {
        o.assign(&x.row(r));
    }
    out
}

/// Mean clamped log-loss of the batch and, with respect to the projected
/// rows, its exact gradient. `z` holds the projected batch rows in
/// [`batch_rows`] order.
fn loss_and_z_grad(z: ArrayView2<f64>, labels: &[usize], batch: &Batch) -> (f64, Array2<f64>) {
    let b = batch.prediction.len();
    let k = batch.background.len();
    let mut offsets = Vec::with_capacity(k + 1);
    offsets.push(b);
    for bg in &batch.background {
        offsets.push(offsets.last().unwrap() + bg.len());
    }
    let log_floor = PROB_FLOOR.ln();
    let mut dz = Array2::zeros(z.raw_dim());
    let mut loss = 0.0;
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();

    for j in 0..b {
        let y = labels[batch.prediction[j]];
        let zj = &rows[j];
        // Log kernel weights to every background row, grouped by class.
        let lw: Vec<Vec<f64>> = (0..k)
            .map(|c| (offsets[c]..offsets[c + 1]).map(|i| -0.5 * sq_dist(zj, &rows[i])).collect())
            .collect();
        let class_lse: Vec<f64> = lw.iter().map(|w| logsumexp(w.iter().copied())).collect();
        let scores: Vec<f64> = (0..k)
            .map(|c| (batch.class_sizes[c] as f64 / lw[c].len() as f64).ln() + class_lse[c])
            .collect();
        let total = logsumexp(scores.iter().copied());
        let log_py = scores[y] - total;
        if log_py < log_floor || log_py.is_nan() {
            loss -= log_floor;
            continue;
        }
        loss -= log_py;
        // d(-log p_y)/d(log weight i of class c) = (p_c - [c = y]) * r_i,
        // with r_i the weight's share within its class.
        for c in 0..k {
            let p_c = (scores[c] - total).exp();
            let coef = p_c - if c == y { 1.0 } else { 0.0 };
            if coef == 0.0 {
                continue;
            }
            for (t, i) in (offsets[c]..offsets[c + 1]).enumerate() {
                let g = coef * (lw[c][t] - class_lse[c]).exp() / b as f64;
                if g == 0.0 {
                    continue;
                }
                // log weight = -|z_j - z_i|^2 / 2
                for (a, (&zjv, &ziv)) in zj.iter().zip(&rows[i]).enumerate() {
                    let diff = zjv - ziv;
                    dz[[j, a]] -= g * diff;
                    dz[[i, a]] += g * diff;
                }
            }
        }
    }
    (loss / b as f64, dz)
}

/// Batch loss and its gradient with respect to every trainable parameter.
///
/// `batch_seed` is only used to label a non-finite-loss error.
pub fn compute_batch_loss_and_grads(
    params: &ProjectionParams,
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    batch: &Batch,
    batch_seed: u64,
) -> Result<(f64, ProjectionGrads)> {
    if batch.prediction.is_empty() {
        return Err(KcalError::Argument("batch has no prediction rows".into()));
    }
    if let Some(c) = batch.background.iter().position(Vec::is_empty) {
        return Err(KcalError::Argument(format!("background set for class {c} is empty")));
    }
    let x = gather(embeddings, &batch_rows(batch));
    let (z, cache) = params.forward(x.view())?;
    // Diverged parameters; the clamp below would otherwise hide the NaN.
    if z.iter().any(|v| !v.is_finite()) {
        return Err(KcalError::NonFiniteLoss {
            loss: f64::NAN,
            batch_seed,
        });
    }
    let (loss, dz) = loss_and_z_grad(z.view(), labels, batch);
    if !loss.is_finite() {
        return Err(KcalError::NonFiniteLoss { loss, batch_seed });
    }
    let grads = params.backward(&cache, dz.view())?;
    Ok((loss, grads))
}

/// Torch-style `ReduceLROnPlateau` in `min` mode with a relative threshold.
#[derive(Debug, Clone)]
struct Plateau {
    best: f64,
    bad_epochs: usize,
    patience: usize,
    factor: f64,
}

impl Plateau {
    const THRESHOLD: f64 = 1e-4;

    fn new(patience: usize, factor: f64) -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
        }
    }

    fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - Self::THRESHOLD) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// Initializes a projection, freezes its normalization on the training set,
/// and runs plain SGD for `epochs * batches_per_epoch` batches.
pub fn train_projection(config: &TrainConfig, train: &EmbeddingDataset) -> Result<TrainReport> {
    config.validate()?;
    let partition = train.partition();
    if let Some(k) = partition.counts.iter().position(|&c| c == 0) {
        return Err(KcalError::Validation(format!("class {k} has no training rows")));
    }
    let batch_size = config.batch_size.min(train.len());
    if batch_size < config.batch_size {
        log::warn!("batch size reduced to the {} available rows", train.len());
    }
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let output_dim = config.output_dim.unwrap_or_else(|| default_output_dim(train.dim()));
    let mut params = ProjectionParams::init(train.dim(), output_dim, config.arch, master.next_u64())?;
    params.input_kind = config.input_kind;
    if config.arch != Arch::Identity {
        params.freeze_normalization(train.embeddings.view())?;
    }

    let mut lr = config.learning_rate;
    let mut plateau = Plateau::new(config.plateau_patience, config.plateau_factor);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut learning_rates = Vec::with_capacity(config.epochs);
    let mut sampling_warnings = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for _ in 0..config.batches_per_epoch {
            let batch_seed = master.next_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let batch = sample_batch(&partition, batch_size, config.background_per_class, &mut rng)?;
            sampling_warnings += usize::from(batch.with_replacement);
            let (loss, grads) =
                compute_batch_loss_and_grads(&params, train.embeddings.view(), &train.labels, &batch, batch_seed)?;
            params.sgd_step(&grads, lr);
            sum += loss;
        }
        let mean = if config.batches_per_epoch == 0 { f64::NAN } else { sum / config.batches_per_epoch as f64 };
        log::info!("epoch {epoch}: loss {mean:.6} lr {lr:.3e}");
        epoch_losses.push(mean);
        learning_rates.push(lr);
        if mean.is_finite() {
            lr = plateau.step(mean, lr);
        }
    }
    Ok(TrainReport {
        epoch_losses,
        learning_rates,
        seed: config.seed,
        sampling_warnings,
        params,
    })
}
