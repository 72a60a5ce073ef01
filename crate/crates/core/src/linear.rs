//! Linear supervised factor models with two supervision styles.
//!
//! Observations are columns: predictors X ∈ R^{p×N} and outcomes Y ∈ R^{q×N},
//! both mean-centered. Local supervision optimizes loadings together with
//! free per-observation scores,
//!
//! ```text
//! min_{W,D,S}  ‖X − W S‖²_F + μ ‖Y − D S‖²_F,
//! ```
//!
//! while encoded supervision constrains the scores to be a linear function
//! of the predictors alone, S = A X:
//!
//! ```text
//! min_{W,D,A}  ‖X − W A X‖²_F + μ ‖Y − D A X‖²_F.
//! ```
//!
//! Both optima are spanned by the top-L eigenvectors of a (p+q)×(p+q)
//! block matrix: the local system
//! `B = [[XXᵀ, μXYᵀ], [YXᵀ, μYYᵀ]]`, and the encoded system which differs
//! only in its bottom-right block `μ·Y P_X Yᵀ` with
//! `P_X = Xᵀ(XXᵀ)⁻¹X` the projection onto the row space of X. B is
//! asymmetric for μ ≠ 1, so the solver works on the similar symmetric
//! matrix `T B T⁻¹` with `T = diag(I_p, √μ·I_q)` and maps eigenvectors
//! back, which keeps every eigenvalue real.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{check_finite, normalize_with_sign, row_means, subtract_mean, RIDGE_REL};

/// Supervision style for the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Scores are free per-observation variables, shared with the outcome.
    Local,
    /// Scores are a linear function of the predictors, S = A X.
    Encoded,
}

/// A variables-by-observations matrix that has been mean-centered, with the
/// removed row means retained for later un-centering.
#[derive(Debug, Clone)]
pub struct Centered {
    values: DMatrix<f64>,
    mean: DVector<f64>,
}

impl Centered {
    /// Centers `raw` by its own row means. Requires at least two
    /// observations and finite entries.
    pub fn center(raw: &DMatrix<f64>) -> Result<Self> {
        check_finite(raw, "data matrix")?;
        if raw.ncols() < 2 {
            return Err(Error::InvalidData(format!(
                "centering needs at least 2 observations, got {}",
                raw.ncols()
            )));
        }
        let mean = row_means(raw);
        let values = subtract_mean(raw, &mean);
        Ok(Centered { values, mean })
    }

    /// Centers `raw` by an externally supplied mean (typically the training
    /// mean, applied to held-out data).
    pub fn with_mean(raw: &DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        check_finite(raw, "data matrix")?;
        if mean.len() != raw.nrows() {
            return Err(Error::ShapeError(format!(
                "mean has {} entries but data has {} rows",
                mean.len(),
                raw.nrows()
            )));
        }
        let values = subtract_mean(raw, &mean);
        Ok(Centered { values, mean })
    }

    /// Centered values (row means zero when self-centered).
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// The subtracted row means.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Number of observations (columns).
    pub fn nobs(&self) -> usize {
        self.values.ncols()
    }

    /// Number of variables (rows).
    pub fn nvars(&self) -> usize {
        self.values.nrows()
    }
}

/// Fitted linear supervised factor model.
///
/// Every stacked column `[W_l; D_l]` has unit Euclidean norm with the
/// largest-magnitude entry positive; eigenvalues are real and descending.
#[derive(Debug, Clone)]
pub struct LinearFactorModel {
    mode: Mode,
    mu: f64,
    w: DMatrix<f64>,
    d: DMatrix<f64>,
    a: Option<DMatrix<f64>>,
    eigenvalues: DVector<f64>,
    x_mean: DVector<f64>,
    y_mean: DVector<f64>,
}

/// Default ridge added to a singular XXᵀ before inversion:
/// `1e-8 · trace(XXᵀ) / p`.
pub fn default_ridge(x: &Centered) -> f64 {
    let xxt_trace: f64 = x.values.iter().map(|v| v * v).sum();
    RIDGE_REL * xxt_trace / x.nvars() as f64
}

/// Builds the local-supervision block system
/// `B = [[XXᵀ, μXYᵀ], [YXᵀ, μYYᵀ]]`.
pub fn build_local_system(x: &Centered, y: &Centered, mu: f64) -> Result<DMatrix<f64>> {
    check_mu(mu)?;
    check_paired(x, y)?;
    let (p, q) = (x.nvars(), y.nvars());
    let xxt = &x.values * x.values.transpose();
    let xyt = &x.values * y.values.transpose();
    let yyt = &y.values * y.values.transpose();
    let mut b = DMatrix::zeros(p + q, p + q);
    b.view_mut((0, 0), (p, p)).copy_from(&xxt);
    b.view_mut((0, p), (p, q)).copy_from(&(mu * &xyt));
    b.view_mut((p, 0), (q, p)).copy_from(&xyt.transpose());
    b.view_mut((p, p), (q, q)).copy_from(&(mu * &yyt));
    Ok(b)
}

/// Builds the encoded-supervision block system, which replaces the local
/// system's bottom-right block with `μ·Y P_X Yᵀ`, `P_X = Xᵀ(XXᵀ)⁻¹X`.
/// `ridge` is added to the diagonal of XXᵀ only if its plain Cholesky
/// factorization fails; a zero ridge on a singular XXᵀ is an error.
pub fn build_encoded_system(
    x: &Centered,
    y: &Centered,
    mu: f64,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    check_mu(mu)?;
    check_paired(x, y)?;
    let (p, q) = (x.nvars(), y.nvars());
    let xxt = &x.values * x.values.transpose();
    let xyt = &x.values * y.values.transpose();
    // Y P_X Yᵀ = (XYᵀ)ᵀ (XXᵀ)⁻¹ (XYᵀ), without forming the N×N projector.
    let z = chol_solve_with_ridge(&xxt, &xyt, ridge, "XXᵀ")?;
    let y_px_yt = xyt.transpose() * z;
    let mut b = build_local_system(x, y, mu)?;
    b.view_mut((p, p), (q, q)).copy_from(&(mu * &y_px_yt));
    Ok(b)
}

/// Solves the asymmetric block system via its symmetric similarity
/// transform. `p` is the predictor block size. Returns the top-`l`
/// eigenvalues (descending, real) and the mapped-back stacked eigenvectors,
/// each normalized to unit length with the sign convention applied.
pub fn symmetric_eigensolve(
    b: &DMatrix<f64>,
    p: usize,
    mu: f64,
    l: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_mu(mu)?;
    if mu <= 0.0 {
        return Err(Error::InvalidConfig("mu must be positive for eigensolve".into()));
    }
    let d = b.nrows();
    if l > d {
        return Err(Error::ShapeError(format!(
            "requested {l} eigenpairs from a {d}x{d} system"
        )));
    }
    if p > d {
        return Err(Error::ShapeError(format!(
            "predictor block {p} exceeds system size {d}"
        )));
    }
    let sqrt_mu = mu.sqrt();
    // T B T⁻¹ scales the top-right block by 1/√μ and the bottom-left by √μ.
    let mut m = b.clone();
    for i in 0..p {
        for j in p..d {
            m[(i, j)] /= sqrt_mu;
            m[(j, i)] *= sqrt_mu;
        }
    }
    // The two off-diagonal blocks agree mathematically; average away the
    // last-ulp asymmetry from the two separate matrix products.
    let m = (&m + m.transpose()) * 0.5;
    let (vals, vecs) = crate::linalg::sorted_symmetric_eigen(&m)?;
    let mut stacked = DMatrix::zeros(d, l);
    for k in 0..l {
        let mut v = DVector::from_column_slice(vecs.column(k).as_slice());
        // Map back through T⁻¹: the outcome block is divided by √μ.
        for i in p..d {
            v[i] /= sqrt_mu;
        }
        normalize_with_sign(&mut v);
        stacked.set_column(k, &v);
    }
    let top = DVector::from_iterator(l, vals.iter().take(l).copied());
    Ok((top, stacked))
}

/// Fits a linear supervised factor model on centered data by the analytic
/// eigendecomposition. Encoded mode additionally extracts the encoder
/// `A = (WᵀW + μDᵀD)⁻¹(WᵀX + μDᵀY)Xᵀ(XXᵀ)⁻¹` from the fitted loadings.
pub fn fit(x: &Centered, y: &Centered, l: usize, mu: f64, mode: Mode) -> Result<LinearFactorModel> {
    check_mu(mu)?;
    if mu <= 0.0 {
        return Err(Error::InvalidConfig("mu must be positive".into()));
    }
    check_paired(x, y)?;
    let (p, q, n) = (x.nvars(), y.nvars(), x.nobs());
    if l < 1 || l > (p + q).min(n) {
        return Err(Error::InvalidConfig(format!(
            "factor count {l} outside 1..=min(p+q={}, N={n})",
            p + q
        )));
    }
    let ridge = default_ridge(x);
    let b = match mode {
        Mode::Local => build_local_system(x, y, mu)?,
        Mode::Encoded => build_encoded_system(x, y, mu, ridge)?,
    };
    let (eigenvalues, stacked) = symmetric_eigensolve(&b, p, mu, l)?;
    let w = stacked.rows(0, p).into_owned();
    let d = stacked.rows(p, q).into_owned();
    let a = match mode {
        Mode::Local => None,
        Mode::Encoded => {
            let a = extract_encoder(&w, &d, x, y, mu, ridge)?;
            check_full_row_rank(&a)?;
            Some(a)
        }
    };
    Ok(LinearFactorModel {
        mode,
        mu,
        w,
        d,
        a,
        eigenvalues,
        x_mean: x.mean.clone(),
        y_mean: y.mean.clone(),
    })
}

impl LinearFactorModel {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Predictor loadings, p×L.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Outcome loadings, q×L.
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Linear encoder (Encoded mode only), L×p.
    pub fn a(&self) -> Option<&DMatrix<f64>> {
        self.a.as_ref()
    }

    /// Eigenvalues of the fitted system, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Centers raw predictor data with the model's stored training mean.
    pub fn center_x(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_finite(raw, "predictor matrix")?;
        if raw.nrows() != self.x_mean.len() {
            return Err(Error::ShapeError(format!(
                "predictors have {} rows, model expects {}",
                raw.nrows(),
                self.x_mean.len()
            )));
        }
        Ok(subtract_mean(raw, &self.x_mean))
    }

    /// Centers raw outcome data with the model's stored training mean.
    pub fn center_y(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_finite(raw, "outcome matrix")?;
        if raw.nrows() != self.y_mean.len() {
            return Err(Error::ShapeError(format!(
                "outcomes have {} rows, model expects {}",
                raw.nrows(),
                self.y_mean.len()
            )));
        }
        Ok(subtract_mean(raw, &self.y_mean))
    }

    /// Scores without the outcome. Local mode: least-squares projection
    /// S = (WᵀW)⁻¹WᵀX. Encoded mode: S = A X. `x` must be centered with
    /// the model's stored mean.
    pub fn encode_scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.w.nrows() {
            return Err(Error::ShapeError(format!(
                "predictors have {} rows, model expects {}",
                x.nrows(),
                self.w.nrows()
            )));
        }
        match &self.a {
            Some(a) => Ok(a * x),
            None => {
                let gram = self.w.transpose() * &self.w;
                let chol = gram.cholesky().ok_or_else(|| {
                    Error::SingularSystem("WᵀW is singular in encode_scores".into())
                })?;
                Ok(chol.solve(&(self.w.transpose() * x)))
            }
        }
    }

    /// Joint fixed-point scores given the outcome (Local mode only):
    /// S = (WᵀW + μDᵀD)⁻¹(WᵀX + μDᵀY).
    pub fn scores_with_outcome(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if self.mode != Mode::Local {
            return Err(Error::InvalidConfig(
                "scores_with_outcome is undefined for Encoded mode; the encoder never sees Y"
                    .into(),
            ));
        }
        if x.nrows() != self.w.nrows() || y.nrows() != self.d.nrows() || x.ncols() != y.ncols() {
            return Err(Error::ShapeError(
                "X/Y shapes do not match the model in scores_with_outcome".into(),
            ));
        }
        let gram = self.w.transpose() * &self.w + self.mu * self.d.transpose() * &self.d;
        let rhs = self.w.transpose() * x + self.mu * self.d.transpose() * y;
        let chol = gram.cholesky().ok_or_else(|| {
            Error::SingularSystem("WᵀW + μDᵀD is singular in scores_with_outcome".into())
        })?;
        Ok(chol.solve(&rhs))
    }

    /// Predictor estimate X̂ = W S + stored X mean.
    pub fn reconstruct(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if s.nrows() != self.w.ncols() {
            return Err(Error::ShapeError(format!(
                "scores have {} rows, model has {} factors",
                s.nrows(),
                self.w.ncols()
            )));
        }
        let mut xhat = &self.w * s;
        for mut col in xhat.column_iter_mut() {
            col += &self.x_mean;
        }
        Ok(xhat)
    }

    /// Outcome estimate Ŷ = D S + stored Y mean.
    pub fn predict(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if s.nrows() != self.d.ncols() {
            return Err(Error::ShapeError(format!(
                "scores have {} rows, model has {} factors",
                s.nrows(),
                self.d.ncols()
            )));
        }
        let mut yhat = &self.d * s;
        for mut col in yhat.column_iter_mut() {
            col += &self.y_mean;
        }
        Ok(yhat)
    }
}

/// Both Frobenius-norm-squared objective terms, `(‖X − WS‖²_F, ‖Y − DS‖²_F)`,
/// on centered data. The caller combines them with μ.
pub fn evaluate_objective(
    model: &LinearFactorModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    if x.nrows() != model.w.nrows()
        || y.nrows() != model.d.nrows()
        || s.nrows() != model.w.ncols()
        || x.ncols() != s.ncols()
        || y.ncols() != s.ncols()
    {
        return Err(Error::ShapeError(
            "X/Y/S shapes inconsistent in evaluate_objective".into(),
        ));
    }
    let rx = x - &model.w * s;
    let ry = y - &model.d * s;
    Ok((rx.norm_squared(), ry.norm_squared()))
}

/// Encoder extraction from the fitted loadings:
/// `A = (WᵀW + μDᵀD)⁻¹ (WᵀX + μDᵀY) Xᵀ (XXᵀ)⁻¹`, with the same ridge
/// fallback as the encoded system builder.
fn extract_encoder(
    w: &DMatrix<f64>,
    d: &DMatrix<f64>,
    x: &Centered,
    y: &Centered,
    mu: f64,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let gram = w.transpose() * w + mu * d.transpose() * d;
    let rhs = w.transpose() * &x.values + mu * d.transpose() * &y.values;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("WᵀW + μDᵀD is singular in encoder extraction".into()))?;
    let z = chol.solve(&rhs); // L×N
    let zxt = z * x.values.transpose(); // L×p
    let xxt = &x.values * x.values.transpose();
    // A = Z Xᵀ (XXᵀ)⁻¹, computed through the transposed solve.
    let at = chol_solve_with_ridge(&xxt, &zxt.transpose(), ridge, "XXᵀ")?;
    Ok(at.transpose())
}

fn check_full_row_rank(a: &DMatrix<f64>) -> Result<()> {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax.max(1.0) {
        return Err(Error::SingularSystem(
            "extracted encoder A is row-rank deficient".into(),
        ));
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "mu must be finite and non-negative, got {mu}"
        )));
    }
    Ok(())
}

fn check_paired(x: &Centered, y: &Centered) -> Result<()> {
    if x.nobs() != y.nobs() {
        return Err(Error::ShapeError(format!(
            "X has {} observations but Y has {}",
            x.nobs(),
            y.nobs()
        )));
    }
    Ok(())
}

/// Cholesky solve of `G X = B` with a caller-supplied ridge applied only
/// when the plain factorization fails. Ridge 0 turns the fallback off.
fn chol_solve_with_ridge(
    g: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ridge: f64,
    what: &str,
) -> Result<DMatrix<f64>> {
    if let Some(chol) = g.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    if ridge <= 0.0 {
        return Err(Error::SingularSystem(format!(
            "{what} is singular and no ridge was allowed"
        )));
    }
    let mut ridged = g.clone();
    for i in 0..g.nrows() {
        ridged[(i, i)] += ridge;
    }
    match ridged.cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(Error::SingularSystem(format!(
            "{what} is singular even after ridge {ridge:.3e}"
        ))),
    }
}

/// Gradient-descent reference fit; an independent optimization route used
/// to cross-check the analytic eigensolution on small instances
/// (p+q ≤ 50, N ≤ 500).
///
/// Minimizes the mode's objective by plain full-batch gradient descent
/// from seeded random initialization. Internally the data are scaled by
/// 1/√N, which scales the whole objective by 1/N without moving its
/// minimizers; this balances the curvature between the loading and score
/// blocks so that one fixed step size serves both.
pub fn oracle_fit(
    x: &Centered,
    y: &Centered,
    l: usize,
    mu: f64,
    mode: Mode,
    steps: usize,
    rate: f64,
    seed: u64,
) -> Result<LinearFactorModel> {
    check_mu(mu)?;
    check_paired(x, y)?;
    let (p, q, n) = (x.nvars(), y.nvars(), x.nobs());
    if p + q > 50 || n > 500 {
        return Err(Error::SizeLimit(format!(
            "oracle_fit is for small instances only (p+q ≤ 50, N ≤ 500), got p+q={}, N={n}",
            p + q
        )));
    }
    if l < 1 || l > (p + q).min(n) {
        return Err(Error::InvalidConfig(format!("factor count {l} out of range")));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let xs = &x.values * scale;
    let ys = &y.values * scale;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal))
    };
    let mut w = randn(p, l);
    let mut d = randn(q, l);
    let mut s = randn(l, n);
    let mut a = randn(l, p);

    let mut prev_loss = f64::INFINITY;
    let mut rising = 0usize;
    for _ in 0..steps {
        if mode == Mode::Encoded {
            s = &a * &xs;
        }
        let (loss, gw, gd, gs) = gd_loss_and_grads(&xs, &ys, mu, &w, &d, &s);
        if !loss.is_finite() {
            return Err(Error::OracleDiverged("non-finite loss in oracle_fit".into()));
        }
        if loss > prev_loss {
            rising += 1;
            if rising >= 100 {
                return Err(Error::OracleDiverged(
                    "loss increased for 100 consecutive steps".into(),
                ));
            }
        } else {
            rising = 0;
        }
        prev_loss = loss;
        match mode {
            Mode::Local => s -= rate * &gs,
            Mode::Encoded => a -= rate * (&gs * xs.transpose()),
        }
        w -= rate * &gw;
        d -= rate * &gd;
    }

    // Normalize stacked columns; the per-column rescaling is absorbed by
    // the scores (Local) or by the matching encoder rows (Encoded).
    let mut stacked = DMatrix::zeros(p + q, l);
    let mut norms = vec![0.0; l];
    for k in 0..l {
        let mut v = DVector::zeros(p + q);
        v.rows_mut(0, p).copy_from(&w.column(k));
        v.rows_mut(p, q).copy_from(&d.column(k));
        norms[k] = v.norm();
        normalize_with_sign(&mut v);
        stacked.set_column(k, &v);
    }
    let wn = stacked.rows(0, p).into_owned();
    let dn = stacked.rows(p, q).into_owned();
    let ridge = default_ridge(x);
    let a = match mode {
        Mode::Local => None,
        // The encoder that pairs with the normalized loadings comes from
        // the exact partial minimization over A given (W, D); this keeps
        // the returned model self-consistent without another GD pass.
        Mode::Encoded => Some(extract_encoder(&wn, &dn, x, y, mu, ridge)?),
    };
    // Eigenvalue estimates: Rayleigh quotients of the stacked directions
    // through the symmetrized system, for reporting only.
    let b = match mode {
        Mode::Local => build_local_system(x, y, mu)?,
        Mode::Encoded => build_encoded_system(x, y, mu, ridge)?,
    };
    let sqrt_mu = mu.sqrt();
    let mut eigenvalues = DVector::zeros(l);
    for k in 0..l {
        let mut u = DVector::from_column_slice(stacked.column(k).as_slice());
        for i in p..p + q {
            u[i] *= sqrt_mu;
        }
        let bu = {
            let mut v = DVector::from_column_slice(stacked.column(k).as_slice());
            v = &b * v;
            for i in p..p + q {
                v[i] *= sqrt_mu;
            }
            v
        };
        eigenvalues[k] = u.dot(&bu) / u.norm_squared();
    }
    Ok(LinearFactorModel {
        mode,
        mu,
        w: wn,
        d: dn,
        a,
        eigenvalues,
        x_mean: x.mean.clone(),
        y_mean: y.mean.clone(),
    })
}

/// Loss and analytic gradients of the shared objective at (W, D, S):
/// `‖X − WS‖²_F + μ‖Y − DS‖²_F`. Encoded mode chains the score gradient
/// through S = A X at the call site.
fn gd_loss_and_grads(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mu: f64,
    w: &DMatrix<f64>,
    d: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> (f64, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let rx = x - w * s;
    let ry = y - d * s;
    let loss = rx.norm_squared() + mu * ry.norm_squared();
    let gw = -2.0 * &rx * s.transpose();
    let gd = -2.0 * mu * &ry * s.transpose();
    let gs = -2.0 * (w.transpose() * rx + mu * d.transpose() * ry);
    (loss, gw, gd, gs)
}

/// Distance between with-outcome and without-outcome score estimates,
/// `‖S_known − S_unknown‖_F / N`; the factor-dragging measure.
pub fn factor_dragging(
    model: &LinearFactorModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<f64> {
    let known = match model.mode {
        Mode::Local => model.scores_with_outcome(x, y)?,
        // The encoder never consumes Y, so both estimates coincide.
        Mode::Encoded => model.encode_scores(x)?,
    };
    let unknown = model.encode_scores(x)?;
    Ok((known - unknown).norm() / x.ncols() as f64)
}
