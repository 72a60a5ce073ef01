//! Non-negative matrix factorization with three supervision strategies:
//! sequential (unsupervised factorization followed by a frozen-score
//! classifier), local (free per-observation scores shared with the
//! classifier), and encoded (scores produced by a feed-forward encoder of
//! the predictors). Training minimizes
//!
//!   Σᵢ ‖xᵢ − W sᵢ‖² + μ Σᵢ ce(βᵀsᵢ + c, yᵢ) + l1·‖β‖₁
//!
//! by seeded mini-batch stochastic gradient with adaptive moments.
//! Non-negativity of W is structural: W is the column-wise softmax of an
//! unconstrained parameter matrix, rescaled so every column has norm √p.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{logistic_fit_l1, logit, sigmoid, softplus, softplus_inverse};
use crate::optim::{Nadam, OptimizerConfig};

/// Stabilizer added to multiplicative-update denominators.
const MU_UPDATE_DELTA: f64 = 1e-12;
/// Multiplicative-update sweeps used to warm-start every supervised mode
/// and as the sequential mode's first stage.
pub const WARM_START_SWEEPS: usize = 200;
/// Multiplicative-update sweeps for fixed-loadings projection scoring.
const PROJECTION_SWEEPS: usize = 500;
/// Proximal-gradient iterations for the sequential classifier stage.
const SEQUENTIAL_HEAD_ITERATIONS: usize = 5_000;
/// Training loss is recorded every this many optimizer iterations.
const LOSS_RECORD_INTERVAL: usize = 100;

/// Supervision strategy for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmfMode {
    Sequential,
    Local,
    Encoded,
}

/// Encoder architecture for encoded supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLayout {
    Affine,
    OneHidden,
}

/// Encoder shape configuration. `hidden_units` is ignored by the affine
/// layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub layout: EncoderLayout,
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
}

fn default_hidden_units() -> usize {
    30
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            layout: EncoderLayout::OneHidden,
            hidden_units: default_hidden_units(),
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layout == EncoderLayout::OneHidden && self.hidden_units == 0 {
            return Err(Error::InvalidConfig(
                "one-hidden encoder needs at least 1 hidden unit".into(),
            ));
        }
        Ok(())
    }
}

/// Feed-forward encoder mapping predictors to non-negative scores. Both
/// layouts end in a softplus, so outputs are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Affine {
        a: DMatrix<f64>,
        b: DVector<f64>,
    },
    OneHidden {
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    },
}

pub(crate) struct EncoderCache {
    pre1: Option<DMatrix<f64>>,
    hidden: Option<DMatrix<f64>>,
    pre2: DMatrix<f64>,
}

impl Encoder {
    /// Small random weights with output biases at zero. Suitable for
    /// gradient checks and tests; `fit` uses a warm-start-aware init.
    pub fn random(spec: &EncoderSpec, input_dim: usize, output_dim: usize, seed: u64) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut norm = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
        match spec.layout {
            EncoderLayout::Affine => Encoder::Affine {
                a: DMatrix::from_fn(output_dim, input_dim, |_, _| norm(0.1)),
                b: DVector::zeros(output_dim),
            },
            EncoderLayout::OneHidden => {
                let h = spec.hidden_units;
                let s1 = 1.0 / (input_dim as f64).sqrt();
                let w1 = DMatrix::from_fn(h, input_dim, |_, _| norm(s1));
                let w2 = DMatrix::from_fn(output_dim, h, |_, _| norm(0.1));
                Encoder::OneHidden {
                    w1,
                    b1: DVector::zeros(h),
                    w2,
                    b2: DVector::zeros(output_dim),
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Affine { a, .. } => a.ncols(),
            Encoder::OneHidden { w1, .. } => w1.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Affine { a, .. } => a.nrows(),
            Encoder::OneHidden { w2, .. } => w2.nrows(),
        }
    }

    pub fn layout(&self) -> EncoderLayout {
        match self {
            Encoder::Affine { .. } => EncoderLayout::Affine,
            Encoder::OneHidden { .. } => EncoderLayout::OneHidden,
        }
    }

    pub fn hidden_units(&self) -> usize {
        match self {
            Encoder::Affine { .. } => 0,
            Encoder::OneHidden { b1, .. } => b1.len(),
        }
    }

    /// Scores for each observation column of `x`.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, EncoderCache) {
        match self {
            Encoder::Affine { a, b } => {
                let mut pre = a * x;
                add_column_broadcast(&mut pre, b);
                let s = pre.map(softplus);
                (
                    s,
                    EncoderCache {
                        pre1: None,
                        hidden: None,
                        pre2: pre,
                    },
                )
            }
            Encoder::OneHidden { w1, b1, w2, b2 } => {
                let mut pre1 = w1 * x;
                add_column_broadcast(&mut pre1, b1);
                let hidden = pre1.map(softplus);
                let mut pre2 = w2 * &hidden;
                add_column_broadcast(&mut pre2, b2);
                let s = pre2.map(softplus);
                (
                    s,
                    EncoderCache {
                        pre1: Some(pre1),
                        hidden: Some(hidden),
                        pre2,
                    },
                )
            }
        }
    }

    /// Parameter gradients for an upstream score gradient `d_scores`,
    /// returned in the same shape as the encoder itself.
    pub(crate) fn backward(
        &self,
        x: &DMatrix<f64>,
        cache: &EncoderCache,
        d_scores: &DMatrix<f64>,
    ) -> Encoder {
        // d softplus(z)/dz = sigmoid(z).
        let d_pre2 = d_scores.component_mul(&cache.pre2.map(sigmoid));
        match self {
            Encoder::Affine { .. } => Encoder::Affine {
                a: &d_pre2 * x.transpose(),
                b: d_pre2.column_sum(),
            },
            Encoder::OneHidden { w1: _, b1: _, w2, b2: _ } => {
                let hidden = cache.hidden.as_ref().expect("one-hidden cache");
                let pre1 = cache.pre1.as_ref().expect("one-hidden cache");
                let g_w2 = &d_pre2 * hidden.transpose();
                let g_b2 = d_pre2.column_sum();
                let d_hidden = w2.transpose() * d_pre2;
                let d_pre1 = d_hidden.component_mul(&pre1.map(sigmoid));
                Encoder::OneHidden {
                    w1: &d_pre1 * x.transpose(),
                    b1: d_pre1.column_sum(),
                    w2: g_w2,
                    b2: g_b2,
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Affine { a, b } => a.len() + b.len(),
            Encoder::OneHidden { w1, b1, w2, b2 } => w1.len() + b1.len() + w2.len() + b2.len(),
        }
    }

    /// Parameters as one flat vector (column-major per block, blocks in
    /// declaration order). Pairing with optimizer state relies on this
    /// order being stable.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        match self {
            Encoder::Affine { a, b } => {
                flat.extend_from_slice(a.as_slice());
                flat.extend_from_slice(b.as_slice());
            }
            Encoder::OneHidden { w1, b1, w2, b2 } => {
                flat.extend_from_slice(w1.as_slice());
                flat.extend_from_slice(b1.as_slice());
                flat.extend_from_slice(w2.as_slice());
                flat.extend_from_slice(b2.as_slice());
            }
        }
        flat
    }

    /// Inverse of [`Encoder::flatten`] into this encoder's shape.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        match self {
            Encoder::Affine { a, b } => {
                let (fa, fb) = flat.split_at(a.len());
                a.as_mut_slice().copy_from_slice(fa);
                b.as_mut_slice().copy_from_slice(fb);
            }
            Encoder::OneHidden { w1, b1, w2, b2 } => {
                let (f1, rest) = flat.split_at(w1.len());
                let (fb1, rest) = rest.split_at(b1.len());
                let (f2, fb2) = rest.split_at(w2.len());
                w1.as_mut_slice().copy_from_slice(f1);
                b1.as_mut_slice().copy_from_slice(fb1);
                w2.as_mut_slice().copy_from_slice(f2);
                b2.as_mut_slice().copy_from_slice(fb2);
            }
        }
    }
}

fn add_column_broadcast(m: &mut DMatrix<f64>, v: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += v;
    }
}

/// Fitted supervised NMF model.
#[derive(Debug, Clone)]
pub struct SupervisedNmfModel {
    mode: NmfMode,
    mu: f64,
    l1_weight: f64,
    w_u: DMatrix<f64>,
    encoder: Option<Encoder>,
    beta: DVector<f64>,
    intercept: f64,
    scores: Option<DMatrix<f64>>,
    loss_history: Vec<(usize, f64)>,
}

impl SupervisedNmfModel {
    pub fn mode(&self) -> NmfMode {
        self.mode
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn l1_weight(&self) -> f64 {
        self.l1_weight
    }

    pub fn nvars(&self) -> usize {
        self.w_u.nrows()
    }

    pub fn ncomponents(&self) -> usize {
        self.w_u.ncols()
    }

    pub fn unconstrained_loadings(&self) -> &DMatrix<f64> {
        &self.w_u
    }

    /// Derived non-negative loadings; every column has norm √p.
    pub fn loadings(&self) -> DMatrix<f64> {
        loadings_from_unconstrained(&self.w_u)
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        self.encoder.as_ref()
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    /// Count of exactly nonzero classifier coefficients.
    pub fn nonzero_beta(&self) -> usize {
        self.beta.iter().filter(|b| **b != 0.0).count()
    }

    /// Training scores retained by the sequential and local modes.
    pub fn scores(&self) -> Option<&DMatrix<f64>> {
        self.scores.as_ref()
    }

    /// (iteration, total loss) samples recorded during training.
    pub fn loss_history(&self) -> &[(usize, f64)] {
        &self.loss_history
    }

    /// Scores for new observations. Encoded mode applies the encoder; the
    /// other modes solve a non-negative least-squares projection against
    /// the fixed loadings.
    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.nvars() {
            return Err(Error::ShapeError(format!(
                "model has {} variables but input has {} rows",
                self.nvars(),
                x.nrows()
            )));
        }
        match (&self.mode, &self.encoder) {
            (NmfMode::Encoded, Some(enc)) => Ok(enc.forward(x)),
            (NmfMode::Encoded, None) => Err(Error::InvalidConfig(
                "encoded model is missing its encoder".into(),
            )),
            _ => Ok(project_scores(&self.loadings(), x)),
        }
    }

    /// P(y=1 | x) per observation column, computed from encoded scores
    /// only. Labels are never consulted.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let scores = self.encode(x)?;
        Ok((0..scores.ncols())
            .map(|i| sigmoid(self.beta.dot(&scores.column(i)) + self.intercept))
            .collect())
    }

    /// Serialized layout, all integers and floats little-endian:
    /// magic "SNMF", version u32, mode u8, encoder-layout u8 (0 none,
    /// 1 affine, 2 one-hidden), reserved u16, p u64, k u64, hidden u64,
    /// mu f64, l1_weight f64, intercept f64, then row-major f64 blocks:
    /// W_u (p×k), encoder blocks (affine: a k×p, b k; one-hidden: w1 h×p,
    /// b1 h, w2 k×h, b2 k), beta (k). Scores and loss history are runtime
    /// artifacts and are not serialized.
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.nvars() as u64;
        let k = self.ncomponents() as u64;
        let (layout_byte, hidden) = match &self.encoder {
            None => (0u8, 0u64),
            Some(Encoder::Affine { .. }) => (1, 0),
            Some(enc @ Encoder::OneHidden { .. }) => (2, enc.hidden_units() as u64),
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SNMF");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(match self.mode {
            NmfMode::Sequential => 0,
            NmfMode::Local => 1,
            NmfMode::Encoded => 2,
        });
        buf.push(layout_byte);
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&p.to_le_bytes());
        buf.extend_from_slice(&k.to_le_bytes());
        buf.extend_from_slice(&hidden.to_le_bytes());
        buf.extend_from_slice(&self.mu.to_le_bytes());
        buf.extend_from_slice(&self.l1_weight.to_le_bytes());
        buf.extend_from_slice(&self.intercept.to_le_bytes());
        write_row_major(&mut buf, &self.w_u);
        match &self.encoder {
            None => {}
            Some(Encoder::Affine { a, b }) => {
                write_row_major(&mut buf, a);
                write_vector(&mut buf, b);
            }
            Some(Encoder::OneHidden { w1, b1, w2, b2 }) => {
                write_row_major(&mut buf, w1);
                write_vector(&mut buf, b1);
                write_row_major(&mut buf, w2);
                write_vector(&mut buf, b2);
            }
        }
        write_vector(&mut buf, &self.beta);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SupervisedNmfModel> {
        let mut cursor = Cursor::new(bytes);
        let magic = cursor.take(4)?;
        if magic != b"SNMF" {
            return Err(Error::InvalidData("bad model magic".into()));
        }
        let version = cursor.read_u32()?;
        if version != 1 {
            return Err(Error::InvalidData(format!(
                "unsupported model version {version}"
            )));
        }
        let mode = match cursor.read_u8()? {
            0 => NmfMode::Sequential,
            1 => NmfMode::Local,
            2 => NmfMode::Encoded,
            other => {
                return Err(Error::InvalidData(format!("unknown mode byte {other}")));
            }
        };
        let layout_byte = cursor.read_u8()?;
        let reserved = cursor.read_u16()?;
        if reserved != 0 {
            return Err(Error::InvalidData("nonzero reserved field".into()));
        }
        let p = cursor.read_u64()? as usize;
        let k = cursor.read_u64()? as usize;
        let hidden = cursor.read_u64()? as usize;
        let mu = cursor.read_f64()?;
        let l1_weight = cursor.read_f64()?;
        let intercept = cursor.read_f64()?;
        if p == 0 || k == 0 {
            return Err(Error::InvalidData("model dimensions must be positive".into()));
        }
        let w_u = cursor.read_row_major(p, k)?;
        let encoder = match layout_byte {
            0 => None,
            1 => Some(Encoder::Affine {
                a: cursor.read_row_major(k, p)?,
                b: cursor.read_vector(k)?,
            }),
            2 => {
                if hidden == 0 {
                    return Err(Error::InvalidData(
                        "one-hidden layout with zero hidden units".into(),
                    ));
                }
                Some(Encoder::OneHidden {
                    w1: cursor.read_row_major(hidden, p)?,
                    b1: cursor.read_vector(hidden)?,
                    w2: cursor.read_row_major(k, hidden)?,
                    b2: cursor.read_vector(k)?,
                })
            }
            other => {
                return Err(Error::InvalidData(format!(
                    "unknown encoder layout byte {other}"
                )));
            }
        };
        let beta = cursor.read_vector(k)?;
        cursor.finish()?;
        Ok(SupervisedNmfModel {
            mode,
            mu,
            l1_weight,
            w_u,
            encoder,
            beta,
            intercept,
            scores: None,
            loss_history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SupervisedNmfModel> {
        let bytes = std::fs::read(path).map_err(|err| {
            if err.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(format!("model file {} not found", path.display()))
            } else {
                Error::Io(err)
            }
        })?;
        SupervisedNmfModel::from_bytes(&bytes)
    }
}

fn write_row_major(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

fn write_vector(buf: &mut Vec<u8>, v: &DVector<f64>) {
    for value in v.iter() {
        buf.extend_from_slice(&value.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::InvalidData("truncated model bytes".into()));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.read_f64()?;
            }
        }
        Ok(m)
    }

    fn read_vector(&mut self, len: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for i in 0..len {
            v[i] = self.read_f64()?;
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes after model payload",
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}

/// Map unconstrained parameters to non-negative loadings: column-wise
/// softmax rescaled so each column has Euclidean norm √p.
pub fn loadings_from_unconstrained(w_u: &DMatrix<f64>) -> DMatrix<f64> {
    softmax_and_loadings(w_u).1
}

fn softmax_and_loadings(w_u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = w_u.nrows();
    let sqrt_p = (p as f64).sqrt();
    let mut g = DMatrix::zeros(p, w_u.ncols());
    let mut w = DMatrix::zeros(p, w_u.ncols());
    for j in 0..w_u.ncols() {
        let col = w_u.column(j);
        let max = col.max();
        let mut sum = 0.0;
        for i in 0..p {
            let e = (col[i] - max).exp();
            g[(i, j)] = e;
            sum += e;
        }
        let mut norm_sq = 0.0;
        for i in 0..p {
            g[(i, j)] /= sum;
            norm_sq += g[(i, j)] * g[(i, j)];
        }
        let scale = sqrt_p / norm_sq.sqrt();
        for i in 0..p {
            w[(i, j)] = g[(i, j)] * scale;
        }
    }
    (g, w)
}

/// Chain a loss gradient with respect to W back to the unconstrained
/// parameters through the softmax-and-rescale map.
fn unconstrained_gradient(g: &DMatrix<f64>, d_w: &DMatrix<f64>) -> DMatrix<f64> {
    let p = g.nrows();
    let sqrt_p = (p as f64).sqrt();
    let mut d_u = DMatrix::zeros(p, g.ncols());
    for j in 0..g.ncols() {
        let gj = g.column(j);
        let dj = d_w.column(j);
        let norm = gj.norm();
        let dot = gj.dot(&dj);
        // d w/d g for w = √p g/‖g‖: √p (I/‖g‖ − g gᵀ/‖g‖³).
        let mut d_g = DVector::zeros(p);
        for i in 0..p {
            d_g[i] = sqrt_p * (dj[i] / norm - gj[i] * dot / (norm * norm * norm));
        }
        // Softmax Jacobian: diag(g) − g gᵀ.
        let inner = gj.dot(&d_g);
        for i in 0..p {
            d_u[(i, j)] = gj[i] * (d_g[i] - inner);
        }
    }
    d_u
}

fn check_nonnegative(x: &DMatrix<f64>, what: &str) -> Result<()> {
    for value in x.iter() {
        if !value.is_finite() {
            return Err(Error::InvalidData(format!("{what} contains a non-finite entry")));
        }
        if *value < 0.0 {
            return Err(Error::InvalidData(format!("{what} contains a negative entry")));
        }
    }
    Ok(())
}

/// Classical multiplicative-update NMF minimizing ‖X − WH‖²_F. The loss is
/// non-increasing across sweeps and the result is a pure function of the
/// seed. Used as the warm start for every supervised mode.
pub fn fit_unsupervised(
    x: &DMatrix<f64>,
    k: usize,
    sweeps: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_nonnegative(x, "NMF input")?;
    let (p, n) = (x.nrows(), x.ncols());
    if p == 0 || n == 0 || k == 0 {
        return Err(Error::InvalidConfig(
            "NMF needs nonempty data and at least one component".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = x.sum() / (p * n) as f64;
    let scale = (mean.max(MU_UPDATE_DELTA) / k as f64).sqrt();
    let mut w = DMatrix::from_fn(p, k, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal).abs()
    });
    let mut h = DMatrix::from_fn(k, n, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal).abs()
    });
    for _ in 0..sweeps {
        let wt_x = w.transpose() * x;
        let wt_w_h = (w.transpose() * &w) * &h;
        h.zip_zip_apply(&wt_x, &wt_w_h, |hij, num, den| {
            *hij *= num / (den + MU_UPDATE_DELTA)
        });
        let x_ht = x * h.transpose();
        let w_h_ht = &w * (&h * h.transpose());
        w.zip_zip_apply(&x_ht, &w_h_ht, |wij, num, den| {
            *wij *= num / (den + MU_UPDATE_DELTA)
        });
    }
    Ok((w, h))
}

/// Non-negative least-squares scores against fixed loadings, by
/// multiplicative updates from a strictly positive start. Deterministic.
fn project_scores(w: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let k = w.ncols();
    let n = x.ncols();
    let init = (x.sum() / (x.len().max(1)) as f64).max(1e-6);
    let mut h = DMatrix::repeat(k, n, init);
    let wt_x = w.transpose() * x;
    let wt_w = w.transpose() * w;
    for _ in 0..PROJECTION_SWEEPS {
        let den = &wt_w * &h;
        h.zip_zip_apply(&wt_x, &den, |hij, num, d| {
            *hij *= num / (d + MU_UPDATE_DELTA)
        });
    }
    h
}

/// Summed cross-entropy of linear scores z against binary labels.
fn ce_sum(z: &DVector<f64>, labels: &[bool]) -> f64 {
    z.iter()
        .zip(labels)
        .map(|(&zi, &y)| softplus(zi) - if y { zi } else { 0.0 })
        .sum()
}

fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|b| b.abs()).sum()
}

fn l1_subgradient(v: &DVector<f64>) -> DVector<f64> {
    v.map(|b| {
        if b > 0.0 {
            1.0
        } else if b < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Total training objective at given loadings and scores.
fn total_loss(
    x: &DMatrix<f64>,
    labels: &[bool],
    w: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    beta: &DVector<f64>,
    intercept: f64,
    mu: f64,
    l1_weight: f64,
) -> f64 {
    let recon = (x - w * scores).norm_squared();
    let z = (scores.transpose() * beta).add_scalar(intercept);
    recon + mu * ce_sum(&z, labels) + l1_weight * l1_norm(beta)
}

/// Gradients of the joint objective for one batch, before any chain into
/// W_u or encoder parameters. `scale` converts the batch sums into a
/// full-data estimate; the L1 penalty enters unscaled.
struct JointGrads {
    loss: f64,
    w: DMatrix<f64>,
    scores: DMatrix<f64>,
    beta: DVector<f64>,
    intercept: f64,
}

#[allow(clippy::too_many_arguments)]
fn joint_loss_and_grads(
    xb: &DMatrix<f64>,
    yb: &[bool],
    w: &DMatrix<f64>,
    sb: &DMatrix<f64>,
    beta: &DVector<f64>,
    intercept: f64,
    mu: f64,
    l1_weight: f64,
    scale: f64,
) -> JointGrads {
    let resid = xb - w * sb;
    let z = (sb.transpose() * beta).add_scalar(intercept);
    let dz = DVector::from_iterator(
        z.len(),
        z.iter()
            .zip(yb)
            .map(|(&zi, &y)| sigmoid(zi) - if y { 1.0 } else { 0.0 }),
    );
    let loss = scale * (resid.norm_squared() + mu * ce_sum(&z, yb)) + l1_weight * l1_norm(beta);
    let g_w = -2.0 * scale * (&resid * sb.transpose());
    let g_scores = -2.0 * scale * (w.transpose() * resid) + (mu * scale) * (beta * dz.transpose());
    let g_beta = (mu * scale) * (sb * &dz) + l1_weight * l1_subgradient(beta);
    let g_intercept = mu * scale * dz.sum();
    JointGrads {
        loss,
        w: g_w,
        scores: g_scores,
        beta: g_beta,
        intercept: g_intercept,
    }
}

/// Gradients of the full encoded objective at an arbitrary parameter
/// point, for gradient verification and training alike.
pub struct EncodedGradients {
    pub loss: f64,
    pub w_u: DMatrix<f64>,
    pub encoder: Encoder,
    pub beta: DVector<f64>,
    pub intercept: f64,
}

/// Full-batch encoded objective value.
#[allow(clippy::too_many_arguments)]
pub fn encoded_loss(
    x: &DMatrix<f64>,
    labels: &[bool],
    w_u: &DMatrix<f64>,
    encoder: &Encoder,
    beta: &DVector<f64>,
    intercept: f64,
    mu: f64,
    l1_weight: f64,
) -> f64 {
    let w = loadings_from_unconstrained(w_u);
    let scores = encoder.forward(x);
    total_loss(x, labels, &w, &scores, beta, intercept, mu, l1_weight)
}

/// Analytic gradients of the full encoded objective with respect to every
/// parameter block.
#[allow(clippy::too_many_arguments)]
pub fn encoded_gradients(
    x: &DMatrix<f64>,
    labels: &[bool],
    w_u: &DMatrix<f64>,
    encoder: &Encoder,
    beta: &DVector<f64>,
    intercept: f64,
    mu: f64,
    l1_weight: f64,
) -> EncodedGradients {
    let (g, w) = softmax_and_loadings(w_u);
    let (scores, cache) = encoder.forward_cached(x);
    let grads = joint_loss_and_grads(x, labels, &w, &scores, beta, intercept, mu, l1_weight, 1.0);
    EncodedGradients {
        loss: grads.loss,
        w_u: unconstrained_gradient(&g, &grads.w),
        encoder: encoder.backward(x, &cache, &grads.scores),
        beta: grads.beta,
        intercept: grads.intercept,
    }
}

fn gather_columns(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), idx.len(), |i, c| x[(i, idx[c])])
}

/// Warm-start parameters reproducing an unsupervised factorization: W_u
/// columns are log column-probabilities of W₀ and H is rescaled so the
/// derived loadings times H equals W₀H₀ wherever W₀ is positive.
fn warm_start(w0: &DMatrix<f64>, h0: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = w0.nrows();
    let sqrt_p = (p as f64).sqrt();
    let mut w_u = DMatrix::zeros(p, w0.ncols());
    let mut h = h0.clone_owned();
    for j in 0..w0.ncols() {
        let col = w0.column(j);
        let sum = col.sum();
        let norm = col.norm();
        if sum <= 0.0 || norm <= 0.0 {
            // Dead component: uniform loadings, scores left untouched.
            continue;
        }
        for i in 0..p {
            w_u[(i, j)] = (col[i] / sum).max(1e-300).ln();
        }
        let mut row = h.row_mut(j);
        row *= norm / sqrt_p;
    }
    (w_u, h)
}

fn init_encoder(
    spec: &EncoderSpec,
    p: usize,
    k: usize,
    h_warm: &DMatrix<f64>,
    seed: u64,
) -> Encoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norm = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    let targets = DVector::from_iterator(
        k,
        (0..k).map(|j| softplus_inverse(h_warm.row(j).sum() / h_warm.ncols() as f64)),
    );
    match spec.layout {
        EncoderLayout::Affine => {
            let s = 0.01 / (p as f64).sqrt();
            Encoder::Affine {
                a: DMatrix::from_fn(k, p, |_, _| norm(s)),
                b: targets,
            }
        }
        EncoderLayout::OneHidden => {
            let h = spec.hidden_units;
            let s1 = 1.0 / (p as f64).sqrt();
            Encoder::OneHidden {
                w1: DMatrix::from_fn(h, p, |_, _| norm(s1)),
                b1: DVector::zeros(h),
                w2: DMatrix::from_fn(k, h, |_, _| norm(0.01)),
                b2: targets,
            }
        }
    }
}

/// Fit a supervised NMF model. All modes warm-start from the same
/// unsupervised factorization so their differences reflect supervision
/// strategy alone. `encoder_spec` is consulted only in encoded mode
/// (defaulting to a 30-unit one-hidden encoder).
#[allow(clippy::too_many_arguments)]
pub fn fit(
    x: &DMatrix<f64>,
    labels: &[bool],
    k: usize,
    mode: NmfMode,
    mu: f64,
    encoder_spec: Option<EncoderSpec>,
    cfg: &OptimizerConfig,
    l1_weight: f64,
) -> Result<SupervisedNmfModel> {
    check_nonnegative(x, "NMF input")?;
    let (p, n) = (x.nrows(), x.ncols());
    if labels.len() != n {
        return Err(Error::ShapeError(format!(
            "{n} observations vs {} labels",
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::InvalidData(
            "training labels contain a single class".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one component".into()));
    }
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "supervision strength must be non-negative, got {mu}"
        )));
    }
    if !l1_weight.is_finite() || l1_weight < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "l1 weight must be non-negative, got {l1_weight}"
        )));
    }
    cfg.validate()?;
    let spec = encoder_spec.unwrap_or_default();
    spec.validate()?;

    let (w0, h0) = fit_unsupervised(x, k, WARM_START_SWEEPS, cfg.seed)?;
    let (w_u_init, h_warm) = warm_start(&w0, &h0);

    if mode == NmfMode::Sequential {
        let head = logistic_fit_l1(&h_warm, labels, l1_weight, SEQUENTIAL_HEAD_ITERATIONS)?;
        let w = loadings_from_unconstrained(&w_u_init);
        let loss = total_loss(x, labels, &w, &h_warm, &head.beta, head.intercept, mu, l1_weight);
        return Ok(SupervisedNmfModel {
            mode,
            mu,
            l1_weight,
            w_u: w_u_init,
            encoder: None,
            beta: head.beta,
            intercept: head.intercept,
            scores: Some(h_warm),
            loss_history: vec![(0, loss)],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w_u = w_u_init;
    let mut beta = DVector::zeros(k);
    let mut intercept = logit(n_pos as f64 / n as f64);
    let mut nadam_w = Nadam::new(p * k, cfg);
    let mut nadam_beta = Nadam::new(k, cfg);
    let mut nadam_intercept = Nadam::new(1, cfg);

    let mut scores = h_warm.clone_owned();
    let mut score_opts: Vec<Nadam> = if mode == NmfMode::Local {
        (0..n).map(|_| Nadam::new(k, cfg)).collect()
    } else {
        Vec::new()
    };
    let mut encoder = if mode == NmfMode::Encoded {
        Some(init_encoder(&spec, p, k, &h_warm, cfg.seed))
    } else {
        None
    };
    let mut nadam_encoder = encoder
        .as_ref()
        .map(|enc| (Nadam::new(enc.param_count(), cfg), Nadam::new(enc.param_count(), cfg)));

    let batch = cfg.batch_size.min(n).max(1);
    let scale = n as f64 / batch as f64;
    let mut history: Vec<(usize, f64)> = Vec::new();
    let record = |iter: usize,
                      w_u: &DMatrix<f64>,
                      scores: &DMatrix<f64>,
                      encoder: &Option<Encoder>,
                      beta: &DVector<f64>,
                      intercept: f64,
                      history: &mut Vec<(usize, f64)>|
     -> Result<()> {
        let w = loadings_from_unconstrained(w_u);
        let full_scores = match encoder {
            Some(enc) => enc.forward(x),
            None => scores.clone_owned(),
        };
        let loss = total_loss(x, labels, &w, &full_scores, beta, intercept, mu, l1_weight);
        if !loss.is_finite() {
            return Err(Error::NumericalError(format!(
                "non-finite training loss at iteration {iter}"
            )));
        }
        history.push((iter, loss));
        Ok(())
    };

    for t in 0..cfg.iterations {
        if t % LOSS_RECORD_INTERVAL == 0 {
            record(t, &w_u, &scores, &encoder, &beta, intercept, &mut history)?;
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let xb = gather_columns(x, &idx);
        let yb: Vec<bool> = idx.iter().map(|&j| labels[j]).collect();
        let (g, w) = softmax_and_loadings(&w_u);

        let (sb, cache) = match &encoder {
            Some(enc) => {
                let (s, c) = enc.forward_cached(&xb);
                (s, Some(c))
            }
            None => (gather_columns(&scores, &idx), None),
        };
        let grads = joint_loss_and_grads(&xb, &yb, &w, &sb, &beta, intercept, mu, l1_weight, scale);
        let g_w_u = unconstrained_gradient(&g, &grads.w);

        nadam_w.step(w_u.as_mut_slice(), g_w_u.as_slice());
        nadam_beta.step(beta.as_mut_slice(), grads.beta.as_slice());
        let mut c_buf = [intercept];
        nadam_intercept.step(&mut c_buf, &[grads.intercept]);
        intercept = c_buf[0];

        match &mut encoder {
            Some(enc) => {
                let (nadam_joint, nadam_sup) = nadam_encoder.as_mut().expect("encoder optimizer");
                let enc_grads = enc.backward(&xb, cache.as_ref().expect("cache"), &grads.scores);
                let mut flat = enc.flatten();
                nadam_joint.step(&mut flat, &enc_grads.flatten());
                enc.assign_from_flat(&flat);
                // Extra encoder-only step on the supervision term keeps the
                // encoder tracking the classifier between joint updates.
                let (sb2, cache2) = enc.forward_cached(&xb);
                let z2 = (sb2.transpose() * &beta).add_scalar(intercept);
                let dz2 = DVector::from_iterator(
                    z2.len(),
                    z2.iter()
                        .zip(&yb)
                        .map(|(&zi, &y)| sigmoid(zi) - if y { 1.0 } else { 0.0 }),
                );
                let d_scores_sup = (mu * scale) * (&beta * dz2.transpose());
                let sup_grads = enc.backward(&xb, &cache2, &d_scores_sup);
                let mut flat = enc.flatten();
                nadam_sup.step(&mut flat, &sup_grads.flatten());
                enc.assign_from_flat(&flat);
            }
            None => {
                // Local free scores: per-column optimizer state with
                // projection onto the non-negative orthant.
                for (b, &j) in idx.iter().enumerate() {
                    let mut s_col: Vec<f64> = scores.column(j).iter().copied().collect();
                    let g_col: Vec<f64> = grads.scores.column(b).iter().copied().collect();
                    score_opts[j].step(&mut s_col, &g_col);
                    for (i, value) in s_col.iter().enumerate() {
                        scores[(i, j)] = value.max(0.0);
                    }
                }
            }
        }
    }
    record(
        cfg.iterations,
        &w_u,
        &scores,
        &encoder,
        &beta,
        intercept,
        &mut history,
    )?;

    Ok(SupervisedNmfModel {
        mode,
        mu,
        l1_weight,
        w_u,
        encoder,
        beta,
        intercept,
        scores: if mode == NmfMode::Local {
            Some(scores)
        } else {
            None
        },
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;

    fn positive_matrix(p: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(p, n, |_, _| rng.random::<f64>() + 0.05)
    }

    /// Small planted-factor dataset whose labels depend on the second
    /// factor's scores.
    fn planted(p: usize, k: usize, n: usize, noise: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(p, k, |_, _| rng.random::<f64>());
        let h = DMatrix::from_fn(k, n, |_, _| 2.0 * rng.random::<f64>());
        let mut x = w * &h;
        for value in x.iter_mut() {
            *value = (*value + noise * rng.sample::<f64, _>(StandardNormal)).max(0.0);
        }
        let cutoff = {
            let mut row: Vec<f64> = h.row(k - 1).iter().copied().collect();
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            row[n / 2]
        };
        let labels: Vec<bool> = h.row(k - 1).iter().map(|&s| s > cutoff).collect();
        (x, labels)
    }

    #[test]
    fn unsupervised_recovers_exact_rank_one() {
        let w = DVector::from_vec(vec![0.4, 1.2, 0.8, 2.0, 0.3, 0.9]);
        let h = nalgebra::RowDVector::from_vec(vec![1.0, 0.2, 0.9, 1.5, 0.6, 0.1, 1.1, 0.7, 0.4]);
        let x = &w * &h;
        let (wf, hf) = fit_unsupervised(&x, 1, 500, 3).unwrap();
        let recon = (&x - wf * hf).norm_squared();
        assert!(recon < 1e-8, "rank-1 reconstruction loss {recon}");
    }

    #[test]
    fn unsupervised_loss_never_increases_across_sweeps() {
        let x = positive_matrix(8, 30, 11);
        let mut prev = f64::INFINITY;
        for sweeps in 1..=30 {
            let (w, h) = fit_unsupervised(&x, 3, sweeps, 42).unwrap();
            let loss = (&x - w * h).norm_squared();
            assert!(
                loss <= prev + 1e-12,
                "loss rose from {prev} to {loss} at sweep {sweeps}"
            );
            prev = loss;
        }
    }

    #[test]
    fn unsupervised_is_deterministic_per_seed() {
        let x = positive_matrix(6, 20, 12);
        let (w1, h1) = fit_unsupervised(&x, 2, 50, 9).unwrap();
        let (w2, h2) = fit_unsupervised(&x, 2, 50, 9).unwrap();
        assert_eq!(w1, w2, "same seed must reproduce loadings bit for bit");
        assert_eq!(h1, h2, "same seed must reproduce scores bit for bit");
    }

    #[test]
    fn unsupervised_rejects_negative_input() {
        let mut x = positive_matrix(4, 8, 1);
        x[(2, 3)] = -0.5;
        assert!(matches!(
            fit_unsupervised(&x, 2, 10, 0),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn derived_loadings_have_sqrt_p_columns_and_positive_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w_u = DMatrix::from_fn(9, 4, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let w = loadings_from_unconstrained(&w_u);
        let sqrt_p = 3.0;
        for j in 0..4 {
            let norm = w.column(j).norm();
            assert!(
                (norm - sqrt_p).abs() < 1e-9,
                "column {j} norm {norm} should be √p"
            );
        }
        assert!(w.iter().all(|v| *v > 0.0), "softmax loadings are strictly positive");
    }

    #[test]
    fn warm_start_reproduces_unsupervised_reconstruction() {
        let x = positive_matrix(7, 25, 30);
        let (w0, h0) = fit_unsupervised(&x, 3, 80, 5).unwrap();
        let (w_u, h) = warm_start(&w0, &h0);
        let w = loadings_from_unconstrained(&w_u);
        let diff = (&w0 * &h0 - w * h).norm();
        assert!(diff < 1e-9, "warm start must preserve the reconstruction, drift {diff}");
    }

    #[test]
    fn encoder_scores_are_positive_and_deterministic() {
        let spec = EncoderSpec::default();
        let enc = Encoder::random(&spec, 5, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(5, 10_000, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s1 = enc.forward(&x);
        let s2 = enc.forward(&x);
        assert_eq!(s1, s2, "encoding is a pure function of the input");
        assert!(s1.iter().all(|v| *v > 0.0), "softplus outputs are strictly positive");
        let two = gather_columns(&x, &[4, 4]);
        let s = enc.forward(&two);
        assert_eq!(s.column(0), s.column(1), "identical inputs encode identically");
    }

    #[test]
    fn encoded_model_reconstruction_is_nonnegative() {
        let spec = EncoderSpec {
            layout: EncoderLayout::Affine,
            hidden_units: 0,
        };
        let model = SupervisedNmfModel {
            mode: NmfMode::Encoded,
            mu: 1.0,
            l1_weight: 0.0,
            w_u: DMatrix::zeros(6, 2),
            encoder: Some(Encoder::random(&spec, 6, 2, 3)),
            beta: DVector::zeros(2),
            intercept: 0.0,
            scores: None,
            loss_history: Vec::new(),
        };
        let x = positive_matrix(6, 40, 14);
        let s = model.encode(&x).unwrap();
        let recon = model.loadings() * s;
        assert!(recon.iter().all(|v| *v >= 0.0), "non-negative times non-negative");
    }

    #[test]
    fn predict_proba_is_half_with_zero_head() {
        let model = SupervisedNmfModel {
            mode: NmfMode::Encoded,
            mu: 1.0,
            l1_weight: 0.0,
            w_u: DMatrix::zeros(4, 2),
            encoder: Some(Encoder::random(&EncoderSpec::default(), 4, 2, 1)),
            beta: DVector::zeros(2),
            intercept: 0.0,
            scores: None,
            loss_history: Vec::new(),
        };
        let x = positive_matrix(4, 7, 2);
        for prob in model.predict_proba(&x).unwrap() {
            assert_eq!(prob, 0.5, "zero head is maximally uncertain");
        }
    }

    #[test]
    fn probability_is_monotone_in_positively_weighted_scores() {
        // Identity affine encoder makes scores monotone in each input
        // coordinate, so raising coordinate 0 raises the probability.
        let p = 3;
        let model = SupervisedNmfModel {
            mode: NmfMode::Encoded,
            mu: 1.0,
            l1_weight: 0.0,
            w_u: DMatrix::zeros(p, 3),
            encoder: Some(Encoder::Affine {
                a: DMatrix::identity(p, p),
                b: DVector::zeros(p),
            }),
            beta: DVector::from_vec(vec![1.0, 2.0, 0.0]),
            intercept: -0.5,
            scores: None,
            loss_history: Vec::new(),
        };
        let base = DMatrix::from_vec(3, 1, vec![0.2, 0.4, 0.6]);
        let mut bumped = base.clone();
        bumped[(0, 0)] += 1.0;
        let p0 = model.predict_proba(&base).unwrap()[0];
        let p1 = model.predict_proba(&bumped).unwrap()[0];
        assert!(p1 > p0, "raising a positively weighted score lowered the probability");
    }

    #[test]
    fn projection_scoring_reduces_residual() {
        let x = positive_matrix(6, 15, 40);
        let (w0, h0) = fit_unsupervised(&x, 2, 120, 7).unwrap();
        let (w_u, _h) = warm_start(&w0, &h0);
        let w = loadings_from_unconstrained(&w_u);
        let s = project_scores(&w, &x);
        assert!(s.iter().all(|v| *v >= 0.0), "projected scores stay non-negative");
        let with = (&x - &w * &s).norm_squared();
        let without = x.norm_squared();
        assert!(with < 0.5 * without, "projection should explain most variance");
        let s2 = project_scores(&w, &x);
        assert_eq!(s, s2, "projection scoring is deterministic");
    }

    #[test]
    fn encoded_gradients_match_finite_differences() {
        let p = 8;
        let k = 3;
        let n = 20;
        let mu = 2.5;
        let l1 = 1e-2;
        let x = positive_matrix(p, n, 50);
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        for point in 0..5 {
            let seed = 100 + point as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w_u = DMatrix::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let spec = EncoderSpec {
                layout: EncoderLayout::OneHidden,
                hidden_units: 4,
            };
            let mut encoder = Encoder::random(&spec, p, k, seed + 17);
            // Nonzero beta keeps the L1 term differentiable at the test point.
            let beta = DVector::from_fn(k, |_, _| 0.5 + rng.random::<f64>());
            let intercept = 0.3;
            let analytic = encoded_gradients(&x, &labels, &w_u, &encoder, &beta, intercept, mu, l1);

            let check = |name: &str, analytic_g: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * 1e-6);
                let err = (analytic_g - fd).abs() / (analytic_g.abs() + fd.abs()).max(1e-4);
                assert!(
                    err < 1e-4,
                    "{name} gradient mismatch at point {point}: analytic {analytic_g}, fd {fd}"
                );
            };

            for i in 0..p {
                for j in 0..k {
                    let mut wp = w_u.clone();
                    wp[(i, j)] += 1e-6;
                    let mut wm = w_u.clone();
                    wm[(i, j)] -= 1e-6;
                    check(
                        "w_u",
                        analytic.w_u[(i, j)],
                        encoded_loss(&x, &labels, &wp, &encoder, &beta, intercept, mu, l1),
                        encoded_loss(&x, &labels, &wm, &encoder, &beta, intercept, mu, l1),
                    );
                }
            }
            let flat = encoder.flatten();
            let analytic_flat = analytic.encoder.flatten();
            for i in 0..flat.len() {
                let mut fp = flat.clone();
                fp[i] += 1e-6;
                let mut fm = flat.clone();
                fm[i] -= 1e-6;
                encoder.assign_from_flat(&fp);
                let plus = encoded_loss(&x, &labels, &w_u, &encoder, &beta, intercept, mu, l1);
                encoder.assign_from_flat(&fm);
                let minus = encoded_loss(&x, &labels, &w_u, &encoder, &beta, intercept, mu, l1);
                encoder.assign_from_flat(&flat);
                check("encoder", analytic_flat[i], plus, minus);
            }
            for i in 0..k {
                let mut bp = beta.clone();
                bp[i] += 1e-6;
                let mut bm = beta.clone();
                bm[i] -= 1e-6;
                check(
                    "beta",
                    analytic.beta[i],
                    encoded_loss(&x, &labels, &w_u, &encoder, &bp, intercept, mu, l1),
                    encoded_loss(&x, &labels, &w_u, &encoder, &bm, intercept, mu, l1),
                );
            }
            check(
                "intercept",
                analytic.intercept,
                encoded_loss(&x, &labels, &w_u, &encoder, &beta, intercept + 1e-6, mu, l1),
                encoded_loss(&x, &labels, &w_u, &encoder, &beta, intercept - 1e-6, mu, l1),
            );
        }
    }

    #[test]
    fn fit_rejects_single_class_and_negative_data() {
        let x = positive_matrix(5, 12, 60);
        let cfg = OptimizerConfig {
            iterations: 10,
            ..OptimizerConfig::default()
        };
        let one_class = vec![true; 12];
        assert!(matches!(
            fit(&x, &one_class, 2, NmfMode::Local, 1.0, None, &cfg, 0.0),
            Err(Error::InvalidData(_))
        ));
        let mut bad = x.clone();
        bad[(0, 0)] = -1.0;
        let labels: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        assert!(matches!(
            fit(&bad, &labels, 2, NmfMode::Local, 1.0, None, &cfg, 0.0),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn local_fit_reduces_loss_and_keeps_scores_nonnegative() {
        let (x, labels) = planted(10, 2, 60, 0.05, 70);
        let cfg = OptimizerConfig {
            iterations: 1_500,
            batch_size: 32,
            seed: 4,
            ..OptimizerConfig::default()
        };
        let model = fit(&x, &labels, 2, NmfMode::Local, 2.0, None, &cfg, 1e-3).unwrap();
        let history = model.loss_history();
        assert!(history.len() >= 2, "loss should be recorded during training");
        assert!(history.iter().all(|(_, l)| l.is_finite()));
        let first = history.first().unwrap().1;
        let last = history.last().unwrap().1;
        assert!(last < first, "training should reduce the loss: {first} -> {last}");
        let scores = model.scores().expect("local mode stores scores");
        assert!(scores.iter().all(|v| *v >= 0.0), "projected scores stay non-negative");
        let w = model.loadings();
        let sqrt_p = (10f64).sqrt();
        for j in 0..2 {
            assert!((w.column(j).norm() - sqrt_p).abs() < 1e-9);
        }
    }

    #[test]
    fn encoded_fit_with_zero_mu_matches_unsupervised_reconstruction() {
        let (x, labels) = planted(12, 2, 60, 0.05, 71);
        let cfg = OptimizerConfig {
            iterations: 12_000,
            batch_size: 32,
            step_size: 2e-3,
            seed: 6,
            ..OptimizerConfig::default()
        };
        let spec = EncoderSpec {
            layout: EncoderLayout::OneHidden,
            hidden_units: 16,
        };
        let model = fit(&x, &labels, 2, NmfMode::Encoded, 0.0, Some(spec), &cfg, 1e-3).unwrap();
        // With mu = 0 the classifier gradient is exactly zero, so beta
        // never moves off its zero initialization.
        assert!(model.beta().iter().all(|b| *b == 0.0));
        let (wu, hu) = fit_unsupervised(&x, 2, 500, cfg.seed).unwrap();
        let unsup = (&x - wu * hu).norm_squared();
        let s = model.encode(&x).unwrap();
        let recon = (&x - model.loadings() * s).norm_squared();
        assert!(
            (recon - unsup).abs() <= 0.05 * unsup,
            "encoded recon {recon} should be within 5% of unsupervised {unsup}"
        );
    }

    #[test]
    fn encoded_fit_separates_planted_labels() {
        let (x, labels) = planted(10, 2, 120, 0.02, 72);
        let cfg = OptimizerConfig {
            iterations: 3_000,
            batch_size: 32,
            seed: 8,
            ..OptimizerConfig::default()
        };
        let model = fit(&x, &labels, 2, NmfMode::Encoded, 10.0, None, &cfg, 1e-3).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        let a = auc(&probs, &labels).unwrap();
        assert!(a > 0.8, "encoded training AUC {a}");
    }

    #[test]
    fn sequential_fit_freezes_unsupervised_scores() {
        let (x, labels) = planted(9, 2, 50, 0.05, 73);
        let cfg = OptimizerConfig {
            seed: 12,
            ..OptimizerConfig::default()
        };
        let model = fit(&x, &labels, 2, NmfMode::Sequential, 10.0, None, &cfg, 1e-3).unwrap();
        let (w0, h0) = fit_unsupervised(&x, 2, WARM_START_SWEEPS, cfg.seed).unwrap();
        let (_w_u, h_expected) = warm_start(&w0, &h0);
        let stored = model.scores().expect("sequential mode stores stage-1 scores");
        assert_eq!(stored, &h_expected, "stage-1 scores must be frozen, not retrained");
        assert!(model.encoder().is_none());
    }

    #[test]
    fn serialization_round_trips_every_mode_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut random_model = |mode: NmfMode, encoder: Option<Encoder>| SupervisedNmfModel {
            mode,
            mu: rng.random::<f64>() * 10.0,
            l1_weight: rng.random::<f64>() * 0.1,
            w_u: DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal)),
            encoder,
            beta: DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)),
            intercept: rng.sample::<f64, _>(StandardNormal),
            scores: None,
            loss_history: Vec::new(),
        };
        let models = vec![
            random_model(NmfMode::Sequential, None),
            random_model(NmfMode::Local, None),
            random_model(
                NmfMode::Encoded,
                Some(Encoder::random(
                    &EncoderSpec {
                        layout: EncoderLayout::Affine,
                        hidden_units: 0,
                    },
                    6,
                    3,
                    5,
                )),
            ),
            random_model(
                NmfMode::Encoded,
                Some(Encoder::random(
                    &EncoderSpec {
                        layout: EncoderLayout::OneHidden,
                        hidden_units: 4,
                    },
                    6,
                    3,
                    6,
                )),
            ),
        ];
        for model in models {
            let bytes = model.to_bytes();
            let loaded = SupervisedNmfModel::from_bytes(&bytes).unwrap();
            assert_eq!(loaded.to_bytes(), bytes, "round trip must be bit-exact");
            assert_eq!(loaded.mode(), model.mode());
            assert_eq!(loaded.unconstrained_loadings(), model.unconstrained_loadings());
            assert_eq!(loaded.beta(), model.beta());
            assert_eq!(loaded.encoder(), model.encoder());
            assert!(loaded.intercept().to_bits() == model.intercept().to_bits());
        }
    }

    #[test]
    fn serialization_rejects_corrupt_payloads() {
        let model = SupervisedNmfModel {
            mode: NmfMode::Local,
            mu: 1.0,
            l1_weight: 0.0,
            w_u: DMatrix::zeros(3, 2),
            encoder: None,
            beta: DVector::zeros(2),
            intercept: 0.0,
            scores: None,
            loss_history: Vec::new(),
        };
        let bytes = model.to_bytes();
        assert!(matches!(
            SupervisedNmfModel::from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::InvalidData(_))
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            SupervisedNmfModel::from_bytes(&extra),
            Err(Error::InvalidData(_))
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            SupervisedNmfModel::from_bytes(&bad_magic),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn save_and_load_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.snmf");
        let model = SupervisedNmfModel {
            mode: NmfMode::Encoded,
            mu: 10.0,
            l1_weight: 1e-3,
            w_u: positive_matrix(5, 2, 91),
            encoder: Some(Encoder::random(&EncoderSpec::default(), 5, 2, 92)),
            beta: DVector::from_vec(vec![0.3, -0.7]),
            intercept: 0.11,
            scores: None,
            loss_history: Vec::new(),
        };
        model.save(&path).unwrap();
        let loaded = SupervisedNmfModel::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), model.to_bytes());
    }
}
