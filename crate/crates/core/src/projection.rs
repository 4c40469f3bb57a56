//! The learnable projection from `h`-dimensional embeddings to the
//! `d`-dimensional space where the kernel operates.
//!
//! Inputs are first standardized with frozen per-column statistics. The
//! default architecture is a two-layer ReLU MLP plus a linear skip path:
//!
//! ```text
//! x~ = (x - mean) / sqrt(var)
//! z  = relu(x~ W1 + b1) W2 + b2 + x~ Ws
//! ```

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{decode_matrix, encode_matrix, MatrixKind};
use crate::error::{KcalError, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_MAX_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Mlp2Skip,
    Linear,
    Identity,
}

impl std::str::FromStr for Arch {
    type Err = KcalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp2" | "mlp2_skip" | "mlp" => Ok(Arch::Mlp2Skip),
            "linear" => Ok(Arch::Linear),
            "identity" => Ok(Arch::Identity),
            other => Err(KcalError::Argument(format!("unknown architecture {other:?}"))),
        }
    }
}

/// What the projection consumes: penultimate embeddings or classifier logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    Embeddings,
    Logits,
}

/// Default output dimension `min(h, 32)`.
pub fn default_output_dim(input_dim: usize) -> usize {
    input_dim.min(DEFAULT_MAX_DIM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub arch: Arch,
    pub input_kind: InputKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub eps: f64,
    pub norm_mean: Array1<f64>,
    pub norm_var: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Empty unless `arch` is `Mlp2Skip`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ws: Array2<f64>,
}

/// Gradients with the same shapes as the trainable tensors of [`ProjectionParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ws: Array2<f64>,
}

impl ProjectionGrads {
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.ws.as_slice().unwrap(),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&g| g == 0.0))
    }
}

/// Intermediates kept by [`ProjectionParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    normalized: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound))
}

impl ProjectionParams {
    /// Fresh parameters: Glorot-uniform weights, zero biases, unit normalization.
    pub fn init(input_dim: usize, output_dim: usize, arch: Arch, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(KcalError::Argument("input dimension must be >= 1".into()));
        }
        let output_dim = if arch == Arch::Identity { input_dim } else { output_dim };
        if output_dim == 0 || output_dim > input_dim {
            return Err(KcalError::Argument(format!(
                "output dimension {output_dim} must lie in [1, {input_dim}]"
            )));
        }
        let (h, d) = (input_dim, output_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let empty2 = || Array2::zeros((0, 0));
        let empty1 = || Array1::zeros(0);
        let (w1, b1, w2, b2, ws) = match arch {
            Arch::Mlp2Skip => {
                let w1 = glorot(&mut rng, h, d);
                let w2 = glorot(&mut rng, d, d);
                let ws = glorot(&mut rng, h, d);
                (w1, Array1::zeros(d), w2, Array1::zeros(d), ws)
            }
            Arch::Linear => (glorot(&mut rng, h, d), Array1::zeros(d), empty2(), empty1(), empty2()),
            Arch::Identity => (empty2(), empty1(), empty2(), empty1(), empty2()),
        };
        Ok(Self {
            arch,
            input_kind: InputKind::Embeddings,
            input_dim: h,
            output_dim: d,
            eps: NORM_EPS,
            norm_mean: Array1::zeros(h),
            norm_var: Array1::ones(h),
            w1,
            b1,
            w2,
            b2,
            ws,
        })
    }

    /// Sets the normalization statistics to the per-column mean and
    /// population variance (plus `eps`) of `x`.
    pub fn freeze_normalization(&mut self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(KcalError::Argument(format!(
                "expected {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() < 2 {
            return Err(KcalError::Argument(
                "normalization needs at least 2 rows".into(),
            ));
        }
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(self.input_dim);
        for row in x.rows() {
            for ((v, &xi), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                *v += (xi - mu) * (xi - mu);
            }
        }
        self.norm_var = var.mapv(|v: f64| v / n + self.eps);
        self.norm_mean = mean;
        Ok(())
    }

    fn normalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let scale = self.norm_var.mapv(|v| 1.0 / v.sqrt());
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, &mu), &s) in row.iter_mut().zip(self.norm_mean.iter()).zip(scale.iter()) {
                *v = (*v - mu) * s;
            }
        }
        out
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim {
            return Err(KcalError::Argument(format!(
                "projection expects {} input columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let empty = || Array2::zeros((0, 0));
        match self.arch {
            Arch::Identity => Ok((
                x.to_owned(),
                ForwardCache {
                    normalized: empty(),
                    hidden_pre: empty(),
                    hidden: empty(),
                },
            )),
            Arch::Linear => {
                let xn = self.normalize(x);
                let z = xn.dot(&self.w1) + &self.b1;
                Ok((
                    z,
                    ForwardCache {
                        normalized: xn,
                        hidden_pre: empty(),
                        hidden: empty(),
                    },
                ))
            }
            Arch::Mlp2Skip => {
                let xn = self.normalize(x);
                let pre = xn.dot(&self.w1) + &self.b1;
                let hidden = pre.mapv(|v| v.max(0.0));
                let z = hidden.dot(&self.w2) + &self.b2 + xn.dot(&self.ws);
                Ok((
                    z,
                    ForwardCache {
                        normalized: xn,
                        hidden_pre: pre,
                        hidden,
                    },
                ))
            }
        }
    }

    /// Forward pass without keeping the cache.
    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Gradients of `sum(dz * z)` with respect to every trainable tensor.
    /// The ReLU derivative at exactly zero is taken as zero.
    pub fn backward(&self, cache: &ForwardCache, dz: ArrayView2<f64>) -> Result<ProjectionGrads> {
        let mut grads = self.zero_grads();
        if self.arch == Arch::Identity {
            return Ok(grads);
        }
        let n = cache.normalized.nrows();
        if dz.dim() != (n, self.output_dim) {
            return Err(KcalError::Argument(format!(
                "gradient shape {:?} does not match forward output ({n}, {})",
                dz.dim(),
                self.output_dim
            )));
        }
        let xn_t = cache.normalized.t();
        match self.arch {
            Arch::Linear => {
                grads.w1 = xn_t.dot(&dz);
                grads.b1 = dz.sum_axis(Axis(0));
            }
            Arch::Mlp2Skip => {
                grads.w2 = cache.hidden.t().dot(&dz);
                grads.b2 = dz.sum_axis(Axis(0));
                grads.ws = xn_t.dot(&dz);
                let mut dpre = dz.dot(&self.w2.t());
                ndarray::Zip::from(&mut dpre)
                    .and(&cache.hidden_pre)
                    .for_each(|g, &p| {
                        if p <= 0.0 {
                            *g = 0.0;
                        }
                    });
                grads.w1 = xn_t.dot(&dpre);
                grads.b1 = dpre.sum_axis(Axis(0));
            }
            Arch::Identity => unreachable!(),
        }
        Ok(grads)
    }

    pub fn zero_grads(&self) -> ProjectionGrads {
        ProjectionGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            ws: Array2::zeros(self.ws.raw_dim()),
        }
    }

    fn trainable_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.ws.as_slice_mut().unwrap(),
        ]
    }

    pub fn num_trainable(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.ws.len()
    }

    /// All trainable values in the fixed order W1, b1, W2, b2, Ws.
    pub fn trainable_vector(&self) -> Vec<f64> {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.ws.as_slice().unwrap(),
        ]
        .concat()
    }

    pub fn set_trainable_vector(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_trainable() {
            return Err(KcalError::Argument(format!(
                "expected {} values, got {}",
                self.num_trainable(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.trainable_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Plain gradient step `p <- p - lr * g`.
    pub fn sgd_step(&mut self, grads: &ProjectionGrads, lr: f64) {
        for (p, g) in self.trainable_mut().into_iter().zip(grads.slices()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }

    /// Binary serialization: `KPRJ | version u32 | json_len u32 | json | tensors`.
    ///
    /// Tensors follow in the order norm_mean, norm_var, W1, b1, W2, b2, Ws,
    /// each as a KEMB block (vectors are stored as one row; unused tensors as
    /// 0 x 0 blocks).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ProjectionHeader {
            arch: self.arch,
            input_kind: self.input_kind,
            h: self.input_dim,
            d: self.output_dim,
            eps: self.eps,
        };
        let json = serde_json::to_vec(&header).map_err(|e| KcalError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(b"KPRJ");
        out.extend_from_slice(&crate::dataio::FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let as_row = |v: &Array1<f64>| {
            if v.is_empty() {
                Array2::zeros((0, 0))
            } else {
                v.clone().insert_axis(Axis(0))
            }
        };
        let tensors = [
            as_row(&self.norm_mean),
            as_row(&self.norm_var),
            self.w1.clone(),
            as_row(&self.b1),
            self.w2.clone(),
            as_row(&self.b2),
            self.ws.clone(),
        ];
        for t in &tensors {
            let block = encode_matrix(MatrixKind::Embeddings, t)?;
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            out.extend_from_slice(&block);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != b"KPRJ" {
            return Err(KcalError::Format("bad projection magic".into()));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        if version != crate::dataio::FORMAT_VERSION {
            return Err(KcalError::Format(format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize;
        let header: ProjectionHeader = serde_json::from_slice(cursor.take(json_len)?)
            .map_err(|e| KcalError::Format(format!("projection header: {e}")))?;
        let mut blocks = Vec::with_capacity(7);
        for _ in 0..7 {
            let len = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize;
            blocks.push(decode_matrix(MatrixKind::Embeddings, cursor.take(len)?)?);
        }
        if cursor.pos != bytes.len() {
            return Err(KcalError::SizeMismatch {
                expected: cursor.pos as u64,
                found: bytes.len() as u64,
            });
        }
        let flat = |m: &Array2<f64>| Array1::from_iter(m.iter().copied());
        let mut it = blocks.into_iter();
        let mut next = || it.next().unwrap();
        let params = Self {
            arch: header.arch,
            input_kind: header.input_kind,
            input_dim: header.h,
            output_dim: header.d,
            eps: header.eps,
            norm_mean: flat(&next()),
            norm_var: flat(&next()),
            w1: next(),
            b1: flat(&next()),
            w2: next(),
            b2: flat(&next()),
            ws: next(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Shape and invariant checks on a deserialized parameter set.
    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.input_dim, self.output_dim);
        let bad = |what: &str| Err(KcalError::Format(format!("projection: {what}")));
        if self.norm_mean.len() != h || self.norm_var.len() != h {
            return bad("normalization length");
        }
        if self.norm_var.iter().any(|&v| !(v > 0.0)) {
            return bad("non-positive normalization variance");
        }
        let shapes_ok = match self.arch {
            Arch::Identity => d == h && self.num_trainable() == 0,
            Arch::Linear => {
                self.w1.dim() == (h, d) && self.b1.len() == d && self.w2.is_empty() && self.ws.is_empty()
            }
            Arch::Mlp2Skip => {
                self.w1.dim() == (h, d)
                    && self.b1.len() == d
                    && self.w2.dim() == (d, d)
                    && self.b2.len() == d
                    && self.ws.dim() == (h, d)
            }
        };
        if !shapes_ok {
            return bad("tensor shapes do not match architecture");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    arch: Arch,
    #[serde(default)]
    input_kind: InputKind,
    h: usize,
    d: usize,
    eps: f64,
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KcalError::Format("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
