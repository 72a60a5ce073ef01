//! Cross-spectral mixture kernels and a toy-scale Gaussian-process factor
//! model over multichannel windows. A factor's kernel is the real part of
//! a sum of separable components, each pairing a spectral Gaussian
//!
//!   k_q(τ) = exp(−½ ν_q τ² + j ω_q τ)
//!
//! with a low-rank Hermitian coregionalization matrix B_q = B̃_q B̃_q†.
//! Window covariance is Σ_l s²_wl K_l + η⁻¹ I. The module provides exact
//! likelihoods, score inference by projected gradient descent, and an
//! encoded variant whose scores are an affine-softplus function of power
//! features.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{logit, sigmoid, softplus, softplus_inverse, LogisticModel};
use crate::nmf::{Encoder, EncoderLayout, EncoderSpec};
use crate::optim::{Nadam, OptimizerConfig};

/// Largest N·C kernel dimension assembled by default. Desk-scale guard;
/// use [`csm_kernel_matrix_with_limit`] to override deliberately.
pub const DEFAULT_KERNEL_DIM_LIMIT: usize = 4096;

/// Starting spectral bandwidth for encoded training; also sets the
/// peak-suppression radius of the center initialization.
const INIT_BANDWIDTH_HZ: f64 = 2.0;

/// One spectral Gaussian component. The API speaks Hz; internally the
/// center becomes angular frequency ω = 2π·center_hz and the bandwidth
/// becomes ν = (2π·bandwidth_hz)², the squared angular width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralGaussian {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

impl SpectralGaussian {
    pub fn new(center_hz: f64, bandwidth_hz: f64) -> Result<SpectralGaussian> {
        let sg = SpectralGaussian {
            center_hz,
            bandwidth_hz,
        };
        sg.validate()?;
        Ok(sg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_hz > 0.0) || !self.center_hz.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "spectral center must be positive, got {}",
                self.center_hz
            )));
        }
        if !(self.bandwidth_hz > 0.0) || !self.bandwidth_hz.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "spectral bandwidth must be positive, got {}",
                self.bandwidth_hz
            )));
        }
        Ok(())
    }

    fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.center_hz
    }

    fn nu(&self) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.bandwidth_hz;
        w * w
    }

    /// k_q(τ) = exp(−½ ν τ²)·exp(j ω τ).
    pub fn eval(&self, tau_seconds: f64) -> Complex64 {
        let envelope = (-0.5 * self.nu() * tau_seconds * tau_seconds).exp();
        let phase = self.omega() * tau_seconds;
        Complex64::new(envelope * phase.cos(), envelope * phase.sin())
    }

    /// ∂k/∂center_hz = j·2π·τ·k(τ).
    fn eval_d_center(&self, tau: f64) -> Complex64 {
        Complex64::new(0.0, 2.0 * std::f64::consts::PI * tau) * self.eval(tau)
    }

    /// ∂k/∂bandwidth_hz = −4π²·bandwidth·τ²·k(τ).
    fn eval_d_bandwidth(&self, tau: f64) -> Complex64 {
        let four_pi_sq = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
        Complex64::new(-four_pi_sq * self.bandwidth_hz * tau * tau, 0.0) * self.eval(tau)
    }
}

/// Low-rank factor of a coregionalization matrix: B = B̃ B̃† is Hermitian
/// positive semidefinite with rank at most R.
#[derive(Debug, Clone, PartialEq)]
pub struct CoregionalizationFactor {
    pub b_tilde: DMatrix<Complex64>,
}

impl CoregionalizationFactor {
    pub fn channels(&self) -> usize {
        self.b_tilde.nrows()
    }

    pub fn rank(&self) -> usize {
        self.b_tilde.ncols()
    }

    pub fn b(&self) -> DMatrix<Complex64> {
        &self.b_tilde * self.b_tilde.adjoint()
    }
}

/// One kernel component: spectral shape plus cross-channel structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmComponent {
    pub gaussian: SpectralGaussian,
    pub coregionalization: CoregionalizationFactor,
}

/// Parameters of one factor's cross-spectral mixture kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmParams {
    pub components: Vec<CsmComponent>,
}

impl CsmParams {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidConfig(
                "kernel needs at least one spectral component".into(),
            ));
        }
        let c = self.channels();
        for component in &self.components {
            component.gaussian.validate()?;
            if component.coregionalization.channels() != c {
                return Err(Error::ShapeError(
                    "components disagree on channel count".into(),
                ));
            }
            if component.coregionalization.rank() == 0 {
                return Err(Error::InvalidConfig(
                    "coregionalization rank must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.components
            .first()
            .map_or(0, |c| c.coregionalization.channels())
    }
}

/// Kernel matrix over a time grid, channel-major: row c·N+i pairs channel
/// c with time t_i, and entry ((c,i),(c′,j)) is Re(Σ_q B_q[c,c′]
/// k_q(t_i−t_j)). Symmetry is exact because each unordered index pair is
/// computed once and assigned to both triangles.
pub fn csm_kernel_matrix(params: &CsmParams, times: &[f64]) -> Result<DMatrix<f64>> {
    csm_kernel_matrix_with_limit(params, times, DEFAULT_KERNEL_DIM_LIMIT)
}

pub fn csm_kernel_matrix_with_limit(
    params: &CsmParams,
    times: &[f64],
    max_dim: usize,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    if times.is_empty() || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidData("times must be finite and nonempty".into()));
    }
    let c = params.channels();
    let n = times.len();
    let nc = n * c;
    if nc > max_dim {
        return Err(Error::SizeLimit(format!(
            "kernel dimension {nc} exceeds the limit {max_dim}"
        )));
    }
    let lags: Vec<DMatrix<Complex64>> = params
        .components
        .iter()
        .map(|component| {
            DMatrix::from_fn(n, n, |i, j| component.gaussian.eval(times[i] - times[j]))
        })
        .collect();
    let bs: Vec<DMatrix<Complex64>> = params
        .components
        .iter()
        .map(|component| component.coregionalization.b())
        .collect();
    let mut k = DMatrix::zeros(nc, nc);
    for a in 0..nc {
        let (ca, ia) = (a / n, a % n);
        for b in a..nc {
            let (cb, ib) = (b / n, b % n);
            let mut acc = Complex64::new(0.0, 0.0);
            for q in 0..lags.len() {
                acc += bs[q][(ca, cb)] * lags[q][(ia, ib)];
            }
            k[(a, b)] = acc.re;
            k[(b, a)] = acc.re;
        }
    }
    Ok(k)
}

/// Options for encoded factor training; component count, rank, and the
/// fixed noise precision are not in the paper-level call signature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsfaOptions {
    pub components_per_factor: usize,
    pub rank: usize,
    pub noise_precision: f64,
}

impl Default for CsfaOptions {
    fn default() -> Self {
        CsfaOptions {
            components_per_factor: 3,
            rank: 2,
            noise_precision: 10.0,
        }
    }
}

impl CsfaOptions {
    pub fn validate(&self) -> Result<()> {
        if self.components_per_factor == 0 || self.rank == 0 {
            return Err(Error::InvalidConfig(
                "component count and rank must be at least 1".into(),
            ));
        }
        if !(self.noise_precision > 0.0) || !self.noise_precision.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise precision must be positive, got {}",
                self.noise_precision
            )));
        }
        Ok(())
    }
}

/// Gaussian-process factor model over fixed-length windows sharing one
/// sampling grid.
#[derive(Debug, Clone)]
pub struct CsfaModel {
    pub factors: Vec<CsmParams>,
    pub noise_precision: f64,
    pub scores: DMatrix<f64>,
    pub times: Vec<f64>,
    pub encoder: Option<Encoder>,
}

impl CsfaModel {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one factor".into()));
        }
        let c = self.channels();
        for factor in &self.factors {
            factor.validate()?;
            if factor.channels() != c {
                return Err(Error::ShapeError("factors disagree on channel count".into()));
            }
        }
        if !(self.noise_precision > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise precision must be positive, got {}",
                self.noise_precision
            )));
        }
        if self.scores.nrows() != self.factors.len() {
            return Err(Error::ShapeError(format!(
                "{} score rows for {} factors",
                self.scores.nrows(),
                self.factors.len()
            )));
        }
        if self.scores.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(Error::InvalidData("scores must be non-negative".into()));
        }
        if self.times.len() < 2 {
            return Err(Error::InvalidConfig("need at least two sample times".into()));
        }
        Ok(())
    }

    pub fn nfactors(&self) -> usize {
        self.factors.len()
    }

    pub fn channels(&self) -> usize {
        self.factors.first().map_or(0, |f| f.channels())
    }

    pub fn nwindows(&self) -> usize {
        self.scores.ncols()
    }

    pub fn window_dim(&self) -> usize {
        self.channels() * self.times.len()
    }

    fn kernels(&self) -> Result<Vec<DMatrix<f64>>> {
        self.factors
            .iter()
            .map(|f| csm_kernel_matrix(f, &self.times))
            .collect()
    }
}

fn covariance_from(kernels: &[DMatrix<f64>], scores: &[f64], noise_precision: f64) -> DMatrix<f64> {
    let nc = kernels[0].nrows();
    let mut sigma = DMatrix::from_diagonal_element(nc, nc, 1.0 / noise_precision);
    for (kernel, &s) in kernels.iter().zip(scores) {
        sigma += kernel * (s * s);
    }
    sigma
}

/// Covariance of window w: Σ_l s²_wl K_l + η⁻¹ I.
pub fn window_covariance(model: &CsfaModel, w: usize) -> Result<DMatrix<f64>> {
    model.validate()?;
    if w >= model.nwindows() {
        return Err(Error::ShapeError(format!(
            "window {w} out of range for {} windows",
            model.nwindows()
        )));
    }
    let kernels = model.kernels()?;
    let scores: Vec<f64> = model.scores.column(w).iter().copied().collect();
    Ok(covariance_from(&kernels, &scores, model.noise_precision))
}

/// Cholesky with diagonal jitter escalation for stiff covariances.
pub(crate) fn cholesky_with_jitter(
    sigma: &DMatrix<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    for jitter in [0.0, 1e-10, 1e-8, 1e-6] {
        let mut candidate = sigma.clone();
        if jitter > 0.0 {
            for i in 0..candidate.nrows() {
                candidate[(i, i)] += jitter;
            }
        }
        if let Some(chol) = candidate.cholesky() {
            return Ok(chol);
        }
    }
    Err(Error::NumericalError(
        "window covariance is not positive definite at maximum jitter".into(),
    ))
}

struct WindowSolve {
    nll: f64,
    alpha: DVector<f64>,
    sigma_inv: DMatrix<f64>,
}

fn solve_window(sigma: &DMatrix<f64>, y: &DVector<f64>) -> Result<WindowSolve> {
    let nc = sigma.nrows();
    if y.len() != nc {
        return Err(Error::ShapeError(format!(
            "window sample length {} vs covariance dimension {nc}",
            y.len()
        )));
    }
    let chol = cholesky_with_jitter(sigma)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    let nll = 0.5 * (nc as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + y.dot(&alpha));
    Ok(WindowSolve {
        nll,
        alpha,
        sigma_inv: chol.inverse(),
    })
}

/// Exact multivariate-normal negative log likelihood of one window.
pub fn gp_nll(model: &CsfaModel, w: usize, y: &DVector<f64>) -> Result<f64> {
    let sigma = window_covariance(model, w)?;
    Ok(solve_window(&sigma, y)?.nll)
}

/// Mean NLL across all windows; column w of `ys` is scored against window
/// w's covariance.
pub fn mean_gp_nll(model: &CsfaModel, ys: &DMatrix<f64>) -> Result<f64> {
    model.validate()?;
    if ys.ncols() != model.nwindows() {
        return Err(Error::ShapeError(format!(
            "{} sample columns vs {} windows",
            ys.ncols(),
            model.nwindows()
        )));
    }
    let kernels = model.kernels()?;
    let mut total = 0.0;
    for w in 0..ys.ncols() {
        let scores: Vec<f64> = model.scores.column(w).iter().copied().collect();
        let sigma = covariance_from(&kernels, &scores, model.noise_precision);
        total += solve_window(&sigma, &ys.column(w).into_owned())?.nll;
    }
    Ok(total / ys.ncols() as f64)
}

/// Analytic gradient of [`gp_nll`] with respect to window w's scores:
/// ∂NLL/∂s_l = s_l·(tr(Σ⁻¹K_l) − αᵀK_lα) with α = Σ⁻¹y.
pub fn gp_nll_score_gradient(model: &CsfaModel, w: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
    model.validate()?;
    let kernels = model.kernels()?;
    let scores: Vec<f64> = model.scores.column(w).iter().copied().collect();
    let sigma = covariance_from(&kernels, &scores, model.noise_precision);
    let solve = solve_window(&sigma, y)?;
    Ok(score_gradient(&kernels, &scores, &solve))
}

fn score_gradient(kernels: &[DMatrix<f64>], scores: &[f64], solve: &WindowSolve) -> DVector<f64> {
    DVector::from_iterator(
        kernels.len(),
        kernels.iter().zip(scores).map(|(k, &s)| {
            let trace = solve.sigma_inv.dot(k);
            let quad = solve.alpha.dot(&(k * &solve.alpha));
            s * (trace - quad)
        }),
    )
}

/// Infer non-negative scores for every window column of `ys` by projected
/// gradient descent on the window NLL with backtracking line search,
/// holding kernel parameters fixed. Returns the scores and each window's
/// final NLL. A window that cannot beat the all-zero score vector keeps
/// the zeros.
pub fn fit_scores(
    model: &CsfaModel,
    ys: &DMatrix<f64>,
    iterations: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    model.validate()?;
    if ys.nrows() != model.window_dim() {
        return Err(Error::ShapeError(format!(
            "window rows {} vs model dimension {}",
            ys.nrows(),
            model.window_dim()
        )));
    }
    let kernels = model.kernels()?;
    let l = model.nfactors();
    let mut fitted = DMatrix::zeros(l, ys.ncols());
    let mut nlls = Vec::with_capacity(ys.ncols());
    for w in 0..ys.ncols() {
        let y = ys.column(w).into_owned();
        let mut s = vec![0.1; l];
        let mut solve = solve_window(&covariance_from(&kernels, &s, model.noise_precision), &y)?;
        let mut step = 0.1;
        for _ in 0..iterations {
            let grad = score_gradient(&kernels, &s, &solve);
            if grad.iter().any(|g| !g.is_finite()) || !solve.nll.is_finite() {
                return Err(Error::OracleDiverged(format!(
                    "non-finite score search state in window {w}"
                )));
            }
            let mut accepted = false;
            for _ in 0..40 {
                let candidate: Vec<f64> = s
                    .iter()
                    .zip(grad.iter())
                    .map(|(&si, &gi)| (si - step * gi).max(0.0))
                    .collect();
                let cand_solve =
                    solve_window(&covariance_from(&kernels, &candidate, model.noise_precision), &y)?;
                if cand_solve.nll < solve.nll {
                    s = candidate;
                    solve = cand_solve;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // Keep the better of the search result and the feasible zero point.
        let zeros = vec![0.0; l];
        let zero_solve =
            solve_window(&covariance_from(&kernels, &zeros, model.noise_precision), &y)?;
        let (final_s, final_nll) = if zero_solve.nll < solve.nll {
            (zeros, zero_solve.nll)
        } else {
            (s, solve.nll)
        };
        for (i, value) in final_s.iter().enumerate() {
            fitted[(i, w)] = *value;
        }
        nlls.push(final_nll);
    }
    Ok((fitted, nlls))
}

/// Log-scaled mean periodogram features per window: for each channel, the
/// zero-padded |FFT|² of its samples averaged to `bins` one-sided bins,
/// stacked channel-major. These are the encoder inputs for encoded
/// training.
pub fn power_feature_matrix(
    windows: &DMatrix<f64>,
    channels: usize,
    pad_factor: usize,
) -> Result<DMatrix<f64>> {
    if channels == 0 || windows.nrows() % channels != 0 {
        return Err(Error::ShapeError(format!(
            "{} rows do not split into {channels} channels",
            windows.nrows()
        )));
    }
    let n = windows.nrows() / channels;
    let fft_len = (n * pad_factor.max(1)).next_power_of_two();
    let bins = fft_len / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_len);
    let mut features = DMatrix::zeros(channels * bins, windows.ncols());
    for w in 0..windows.ncols() {
        for c in 0..channels {
            let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
            for i in 0..n {
                buf[i] = Complex64::new(windows[(c * n + i, w)], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                features[(c * bins + k, w)] = (buf[k].norm_sqr() / n as f64).ln_1p();
            }
        }
    }
    Ok(features)
}

/// Unconstrained training state: spectral centers and bandwidths live on
/// a softplus reparameterization so positivity is structural.
#[derive(Debug, Clone)]
struct ComponentState {
    rho_center: f64,
    rho_bandwidth: f64,
    b_tilde: DMatrix<Complex64>,
}

#[derive(Debug, Clone)]
struct KernelState {
    factors: Vec<Vec<ComponentState>>,
}

impl KernelState {
    fn materialize(&self) -> Vec<CsmParams> {
        self.factors
            .iter()
            .map(|components| CsmParams {
                components: components
                    .iter()
                    .map(|c| CsmComponent {
                        gaussian: SpectralGaussian {
                            center_hz: softplus(c.rho_center),
                            bandwidth_hz: softplus(c.rho_bandwidth),
                        },
                        coregionalization: CoregionalizationFactor {
                            b_tilde: c.b_tilde.clone(),
                        },
                    })
                    .collect(),
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.factors
            .iter()
            .flatten()
            .map(|c| 2 + 2 * c.b_tilde.len())
            .sum()
    }

    /// Order per component: ρ_center, ρ_bandwidth, then column-major
    /// interleaved (Re, Im) of B̃.
    fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for component in self.factors.iter().flatten() {
            flat.push(component.rho_center);
            flat.push(component.rho_bandwidth);
            for value in component.b_tilde.iter() {
                flat.push(value.re);
                flat.push(value.im);
            }
        }
        flat
    }

    fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for component in self.factors.iter_mut().flatten() {
            component.rho_center = flat[i];
            component.rho_bandwidth = flat[i + 1];
            i += 2;
            for value in component.b_tilde.iter_mut() {
                *value = Complex64::new(flat[i], flat[i + 1]);
                i += 2;
            }
        }
        assert_eq!(i, flat.len(), "kernel parameter length");
    }
}

/// Per-component pieces reused across windows within one iteration.
struct ComponentEval {
    b: DMatrix<Complex64>,
    lag: DMatrix<Complex64>,
    lag_d_center: DMatrix<Complex64>,
    lag_d_bandwidth: DMatrix<Complex64>,
    sigmoid_center: f64,
    sigmoid_bandwidth: f64,
}

struct FactorEval {
    kernel: DMatrix<f64>,
    components: Vec<ComponentEval>,
}

fn evaluate_factors(state: &KernelState, times: &[f64], channels: usize) -> Vec<FactorEval> {
    let n = times.len();
    state
        .factors
        .iter()
        .map(|components| {
            let evals: Vec<ComponentEval> = components
                .iter()
                .map(|cs| {
                    let gaussian = SpectralGaussian {
                        center_hz: softplus(cs.rho_center),
                        bandwidth_hz: softplus(cs.rho_bandwidth),
                    };
                    let coreg = CoregionalizationFactor {
                        b_tilde: cs.b_tilde.clone(),
                    };
                    ComponentEval {
                        b: coreg.b(),
                        lag: DMatrix::from_fn(n, n, |i, j| gaussian.eval(times[i] - times[j])),
                        lag_d_center: DMatrix::from_fn(n, n, |i, j| {
                            gaussian.eval_d_center(times[i] - times[j])
                        }),
                        lag_d_bandwidth: DMatrix::from_fn(n, n, |i, j| {
                            gaussian.eval_d_bandwidth(times[i] - times[j])
                        }),
                        sigmoid_center: sigmoid(cs.rho_center),
                        sigmoid_bandwidth: sigmoid(cs.rho_bandwidth),
                    }
                })
                .collect();
            let nc = n * channels;
            let mut kernel = DMatrix::zeros(nc, nc);
            for a in 0..nc {
                let (ca, ia) = (a / n, a % n);
                for b in a..nc {
                    let (cb, ib) = (b / n, b % n);
                    let mut acc = Complex64::new(0.0, 0.0);
                    for eval in &evals {
                        acc += eval.b[(ca, cb)] * eval.lag[(ia, ib)];
                    }
                    kernel[(a, b)] = acc.re;
                    kernel[(b, a)] = acc.re;
                }
            }
            FactorEval {
                kernel,
                components: evals,
            }
        })
        .collect()
}

/// Σ_ij G[(c,i),(c′,j)]·lag[i,j] for every channel pair, the workhorse of
/// the kernel-parameter chain rule.
fn channel_contraction(
    g: &DMatrix<f64>,
    lag: &DMatrix<Complex64>,
    channels: usize,
    n: usize,
) -> DMatrix<Complex64> {
    let mut z = DMatrix::from_element(channels, channels, Complex64::new(0.0, 0.0));
    for ca in 0..channels {
        for cb in 0..channels {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    acc += lag[(i, j)] * g[(ca * n + i, cb * n + j)];
                }
            }
            z[(ca, cb)] = acc;
        }
    }
    z
}

fn re_sum_b_weighted(b: &DMatrix<Complex64>, z: &DMatrix<Complex64>) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for c in 0..b.nrows() {
        for cp in 0..b.ncols() {
            acc += b[(c, cp)] * z[(c, cp)];
        }
    }
    acc.re
}

/// Gradient of tr(G·∂K) with respect to the real and imaginary parts of
/// B̃, using ∂B = E B̃† + B̃ E† for an elementary perturbation E.
fn b_tilde_gradient(
    b_tilde: &DMatrix<Complex64>,
    z: &DMatrix<Complex64>,
    weight: f64,
) -> DMatrix<Complex64> {
    let c = b_tilde.nrows();
    let r = b_tilde.ncols();
    let mut grad = DMatrix::from_element(c, r, Complex64::new(0.0, 0.0));
    for a in 0..c {
        for col in 0..r {
            let mut s1 = Complex64::new(0.0, 0.0);
            let mut s2 = Complex64::new(0.0, 0.0);
            for cp in 0..c {
                s1 += b_tilde[(cp, col)].conj() * z[(a, cp)];
                s2 += b_tilde[(cp, col)] * z[(cp, a)];
            }
            let g_re = (s1 + s2).re;
            let g_im = s2.im - s1.im;
            grad[(a, col)] = Complex64::new(weight * g_re, weight * g_im);
        }
    }
    grad
}

struct EncodedState {
    kernel: KernelState,
    encoder: Encoder,
    beta: DVector<f64>,
    intercept: f64,
}

struct EncodedGradsFlat {
    loss: f64,
    kernel: Vec<f64>,
    encoder: Vec<f64>,
    beta: DVector<f64>,
    intercept: f64,
}

/// Loss and gradients of the encoded objective over the given window
/// indices: scale·(Σ_w NLL_w + μ·Σ_w ce_w). Also returns the supervision
/// part's encoder gradient for the encoder-only step.
#[allow(clippy::too_many_arguments)]
fn encoded_loss_and_grads(
    state: &EncodedState,
    windows: &DMatrix<f64>,
    times: &[f64],
    channels: usize,
    features: &DMatrix<f64>,
    labels: &[bool],
    idx: &[usize],
    mu: f64,
    noise_precision: f64,
    scale: f64,
) -> Result<(EncodedGradsFlat, Vec<f64>)> {
    let n = times.len();
    let l = state.kernel.factors.len();
    let factor_evals = evaluate_factors(&state.kernel, times, channels);

    let phi = DMatrix::from_fn(features.nrows(), idx.len(), |i, c| features[(i, idx[c])]);
    let (scores, cache) = state.encoder.forward_cached(&phi);
    let mut loss = 0.0;
    let mut d_scores = DMatrix::zeros(l, idx.len());
    let mut d_scores_sup = DMatrix::zeros(l, idx.len());
    let mut kernel_grads = KernelState {
        factors: state
            .kernel
            .factors
            .iter()
            .map(|components| {
                components
                    .iter()
                    .map(|c| ComponentState {
                        rho_center: 0.0,
                        rho_bandwidth: 0.0,
                        b_tilde: DMatrix::from_element(
                            c.b_tilde.nrows(),
                            c.b_tilde.ncols(),
                            Complex64::new(0.0, 0.0),
                        ),
                    })
                    .collect()
            })
            .collect(),
    };
    let mut g_beta = DVector::zeros(l);
    let mut g_intercept = 0.0;

    for (col, &w) in idx.iter().enumerate() {
        let y = windows.column(w).into_owned();
        let s_w: Vec<f64> = scores.column(col).iter().copied().collect();
        let kernels: Vec<&DMatrix<f64>> = factor_evals.iter().map(|f| &f.kernel).collect();
        let mut sigma =
            DMatrix::from_diagonal_element(n * channels, n * channels, 1.0 / noise_precision);
        for (kernel, &s) in kernels.iter().zip(&s_w) {
            sigma += *kernel * (s * s);
        }
        let solve = solve_window(&sigma, &y)?;
        loss += scale * solve.nll;
        // G turns covariance perturbations into NLL perturbations:
        // dNLL = tr(G·dΣ) with G = ½(Σ⁻¹ − ααᵀ).
        let g = 0.5 * (&solve.sigma_inv - &solve.alpha * solve.alpha.transpose());

        for (fi, factor) in factor_evals.iter().enumerate() {
            let s = s_w[fi];
            let trace_term = g.dot(&factor.kernel);
            d_scores[(fi, col)] += scale * 2.0 * s * trace_term;
            let weight = scale * s * s;
            for (ci, component) in factor.components.iter().enumerate() {
                let z = channel_contraction(&g, &component.lag, channels, n);
                let zc = channel_contraction(&g, &component.lag_d_center, channels, n);
                let zb = channel_contraction(&g, &component.lag_d_bandwidth, channels, n);
                let target = &mut kernel_grads.factors[fi][ci];
                target.rho_center +=
                    weight * re_sum_b_weighted(&component.b, &zc) * component.sigmoid_center;
                target.rho_bandwidth +=
                    weight * re_sum_b_weighted(&component.b, &zb) * component.sigmoid_bandwidth;
                let state_bt = &state.kernel.factors[fi][ci].b_tilde;
                target.b_tilde += b_tilde_gradient(state_bt, &z, weight);
            }
        }

        // Supervision term.
        let z_lin = state.beta.dot(&scores.column(col)) + state.intercept;
        let yv = if labels[w] { 1.0 } else { 0.0 };
        loss += scale * mu * (softplus(z_lin) - yv * z_lin);
        let dz = sigmoid(z_lin) - yv;
        for fi in 0..l {
            let g_s = scale * mu * dz * state.beta[fi];
            d_scores[(fi, col)] += g_s;
            d_scores_sup[(fi, col)] = g_s;
            g_beta[fi] += scale * mu * dz * scores[(fi, col)];
        }
        g_intercept += scale * mu * dz;
    }

    let encoder_grads = state.encoder.backward(&phi, &cache, &d_scores);
    let encoder_sup = state.encoder.backward(&phi, &cache, &d_scores_sup);
    Ok((
        EncodedGradsFlat {
            loss,
            kernel: kernel_grads.flatten(),
            encoder: encoder_grads.flatten(),
            beta: g_beta,
            intercept: g_intercept,
        },
        encoder_sup.flatten(),
    ))
}

#[cfg(test)]
fn encoded_loss_only(
    state: &EncodedState,
    windows: &DMatrix<f64>,
    times: &[f64],
    channels: usize,
    features: &DMatrix<f64>,
    labels: &[bool],
    mu: f64,
    noise_precision: f64,
) -> Result<f64> {
    let factor_evals = evaluate_factors(&state.kernel, times, channels);
    let scores = state.encoder.forward(features);
    let n = times.len();
    let mut loss = 0.0;
    for w in 0..windows.ncols() {
        let y = windows.column(w).into_owned();
        let mut sigma =
            DMatrix::from_diagonal_element(n * channels, n * channels, 1.0 / noise_precision);
        for (fi, factor) in factor_evals.iter().enumerate() {
            let s = scores[(fi, w)];
            sigma += &factor.kernel * (s * s);
        }
        loss += solve_window(&sigma, &y)?.nll;
        let z = state.beta.dot(&scores.column(w)) + state.intercept;
        let yv = if labels[w] { 1.0 } else { 0.0 };
        loss += mu * (softplus(z) - yv * z);
    }
    Ok(loss)
}

/// Deterministic spectral-peak initialization: centers go to the largest
/// distinct peaks of the windows' average periodogram.
fn init_centers(
    windows: &DMatrix<f64>,
    channels: usize,
    times: &[f64],
    count: usize,
) -> Vec<f64> {
    let n = times.len();
    let dt = if n >= 2 { times[1] - times[0] } else { 1.0 };
    let fs = 1.0 / dt.max(1e-12);
    let fft_len = (4 * n).next_power_of_two();
    let bins = fft_len / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_len);
    let mut mean_power = vec![0.0; bins];
    for w in 0..windows.ncols() {
        for c in 0..channels {
            let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
            for i in 0..n {
                buf[i] = Complex64::new(windows[(c * n + i, w)], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                mean_power[k] += buf[k].norm_sqr();
            }
        }
    }
    let df = fs / fft_len as f64;
    // Suppress everything within a lobe's width of a chosen peak so the
    // next pick is a distinct spectral feature, not a sidelobe.
    let min_separation = ((2.0 * INIT_BANDWIDTH_HZ / df).ceil() as usize).max(2);
    let mut order: Vec<usize> = (1..bins.saturating_sub(1)).collect();
    order.sort_by(|&a, &b| mean_power[b].partial_cmp(&mean_power[a]).unwrap());
    let mut centers = Vec::with_capacity(count);
    let mut chosen: Vec<usize> = Vec::new();
    for k in order {
        if chosen.iter().any(|&c| k.abs_diff(c) < min_separation) {
            continue;
        }
        chosen.push(k);
        centers.push((k as f64 * df).max(0.5));
        if centers.len() == count {
            break;
        }
    }
    // Sparse spectra may not offer enough distinct peaks; fill the rest
    // evenly across the usable band.
    let mut fill = 1;
    while centers.len() < count {
        centers.push((fill as f64 / (count + 1) as f64) * 0.8 * fs / 2.0 + 1.0);
        fill += 1;
    }
    centers
}

/// Train the encoded factor model: scores are an affine-softplus encoder
/// of window power features, and the loss is Σ_w gp_nll + μ·cross-entropy
/// of a logistic head on the scores. Every iteration takes one joint
/// gradient step and then one encoder-only step on the supervision term.
/// Kernel count, rank, and noise precision come from `options`; all
/// positivity constraints are structural (softplus reparameterization).
#[allow(clippy::too_many_arguments)]
pub fn fit_encoded_csfa(
    windows: &DMatrix<f64>,
    times: &[f64],
    power_features: &DMatrix<f64>,
    labels: &[bool],
    l: usize,
    mu: f64,
    cfg: &OptimizerConfig,
    options: &CsfaOptions,
) -> Result<(CsfaModel, LogisticModel)> {
    options.validate()?;
    cfg.validate()?;
    if times.len() < 2 {
        return Err(Error::InvalidConfig("need at least two sample times".into()));
    }
    if windows.nrows() % times.len() != 0 {
        return Err(Error::ShapeError(format!(
            "{} window rows do not split into samples of length {}",
            windows.nrows(),
            times.len()
        )));
    }
    let channels = windows.nrows() / times.len();
    let nwindows = windows.ncols();
    if channels > 4 || times.len() > 64 || l > 4 || l == 0 {
        return Err(Error::SizeLimit(format!(
            "encoded training is desk-scale only: C={channels}, N={}, L={l}",
            times.len()
        )));
    }
    if power_features.ncols() != nwindows || labels.len() != nwindows {
        return Err(Error::ShapeError(format!(
            "{nwindows} windows vs {} feature columns and {} labels",
            power_features.ncols(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == nwindows {
        return Err(Error::InvalidData(
            "training labels contain a single class".into(),
        ));
    }
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "supervision strength must be non-negative, got {mu}"
        )));
    }

    let q = options.components_per_factor;
    let centers = init_centers(windows, channels, times, l * q);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data_var = {
        let mut acc = 0.0;
        for v in windows.iter() {
            acc += v * v;
        }
        (acc / windows.len() as f64).max(1e-6)
    };
    // Initial coregionalization scale targets the observed marginal
    // variance at the encoder's initial score level of about 0.5.
    let b_scale = (data_var / (0.5 * (l * q * options.rank) as f64)).sqrt();
    let mut kernel = KernelState {
        factors: (0..l)
            .map(|fi| {
                (0..q)
                    .map(|qi| ComponentState {
                        rho_center: softplus_inverse(centers[qi * l + fi]),
                        rho_bandwidth: softplus_inverse(INIT_BANDWIDTH_HZ),
                        b_tilde: DMatrix::from_fn(channels, options.rank, |_, _| {
                            Complex64::new(
                                b_scale * rng.sample::<f64, _>(StandardNormal),
                                b_scale * rng.sample::<f64, _>(StandardNormal),
                            )
                        }),
                    })
                    .collect()
            })
            .collect(),
    };
    let spec = EncoderSpec {
        layout: EncoderLayout::Affine,
        hidden_units: 0,
    };
    let mut encoder = Encoder::random(&spec, power_features.nrows(), l, cfg.seed.wrapping_add(1));
    if let Encoder::Affine { a, b } = &mut encoder {
        *a *= 0.01;
        b.fill(softplus_inverse(0.5));
    }
    let mut beta = DVector::zeros(l);
    let mut intercept = logit(n_pos as f64 / nwindows as f64);

    let mut nadam_kernel = Nadam::new(kernel.param_count(), cfg);
    let mut nadam_encoder = Nadam::new(encoder.param_count(), cfg);
    let mut nadam_encoder_sup = Nadam::new(encoder.param_count(), cfg);
    let mut nadam_beta = Nadam::new(l, cfg);
    let mut nadam_intercept = Nadam::new(1, cfg);

    let batch = cfg.batch_size.min(nwindows).max(1);
    let scale = nwindows as f64 / batch as f64;
    use rand::Rng as _;
    for t in 0..cfg.iterations {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..nwindows)).collect();
        let state = EncodedState {
            kernel: kernel.clone(),
            encoder: encoder.clone(),
            beta: beta.clone(),
            intercept,
        };
        let (grads, encoder_sup_grad) = encoded_loss_and_grads(
            &state,
            windows,
            times,
            channels,
            power_features,
            labels,
            &idx,
            mu,
            options.noise_precision,
            scale,
        )?;
        if !grads.loss.is_finite() {
            return Err(Error::NumericalError(format!(
                "non-finite training loss at iteration {t}"
            )));
        }
        let mut kernel_flat = kernel.flatten();
        nadam_kernel.step(&mut kernel_flat, &grads.kernel);
        kernel.assign_from_flat(&kernel_flat);
        let mut encoder_flat = encoder.flatten();
        nadam_encoder.step(&mut encoder_flat, &grads.encoder);
        encoder.assign_from_flat(&encoder_flat);
        nadam_beta.step(beta.as_mut_slice(), grads.beta.as_slice());
        let mut c_buf = [intercept];
        nadam_intercept.step(&mut c_buf, &[grads.intercept]);
        intercept = c_buf[0];
        // Encoder-only refinement on the supervision loss, at the updated
        // classifier but the pre-step encoder gradient's batch.
        let mut encoder_flat = encoder.flatten();
        nadam_encoder_sup.step(&mut encoder_flat, &encoder_sup_grad);
        encoder.assign_from_flat(&encoder_flat);
    }

    let factors = kernel.materialize();
    let scores = encoder.forward(power_features);
    let model = CsfaModel {
        factors,
        noise_precision: options.noise_precision,
        scores,
        times: times.to_vec(),
        encoder: Some(encoder),
    };
    model.validate()?;
    let head = LogisticModel { beta, intercept };
    Ok((model, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;
    use crate::spectral::{ms_coherence, TimeSeriesWindow, WelchConfig};
    use crate::synth::{gen_csm, stratified_split, CsmSynthConfig};
    use rand::Rng;

    fn random_coreg(channels: usize, rank: usize, scale: f64, seed: u64) -> CoregionalizationFactor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CoregionalizationFactor {
            b_tilde: DMatrix::from_fn(channels, rank, |_, _| {
                Complex64::new(
                    scale * rng.sample::<f64, _>(StandardNormal),
                    scale * rng.sample::<f64, _>(StandardNormal),
                )
            }),
        }
    }

    fn grid(n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 / fs).collect()
    }

    #[test]
    fn spectral_gaussian_is_one_at_zero_lag() {
        let sg = SpectralGaussian::new(11.0, 2.0).unwrap();
        let k0 = sg.eval(0.0);
        assert_eq!(k0, Complex64::new(1.0, 0.0));
    }

    #[test]
    fn spectral_gaussian_is_hermitian_in_lag() {
        let sg = SpectralGaussian::new(7.5, 1.3).unwrap();
        for tau in [0.01, 0.1, 0.33, 1.7] {
            let plus = sg.eval(tau);
            let minus = sg.eval(-tau);
            assert_eq!(plus.re, minus.re);
            assert_eq!(plus.im, -minus.im);
        }
    }

    #[test]
    fn spectral_gaussian_transform_has_matching_center_and_width() {
        let center = 11.0;
        let bandwidth = 2.0;
        let sg = SpectralGaussian::new(center, bandwidth).unwrap();
        let fs = 64.0;
        let n = 1024usize;
        let dt = 1.0 / fs;
        // Sample k over symmetric lags in FFT wrap-around order so the DFT
        // approximates the continuous Fourier transform.
        let mut buf: Vec<Complex64> = (0..n)
            .map(|i| {
                let idx = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
                sg.eval(idx * dt)
            })
            .collect();
        let mut planner = FftPlanner::<f64>::new();
        planner.plan_fft_forward(n).process(&mut buf);
        let df = fs / n as f64;
        let freqs: Vec<f64> = (0..n)
            .map(|k| if k < n / 2 { k as f64 * df } else { (k as f64 - n as f64) * df })
            .collect();
        let weights: Vec<f64> = buf.iter().map(|v| v.norm()).collect();
        let total: f64 = weights.iter().sum();
        let mean: f64 = freqs.iter().zip(&weights).map(|(f, w)| f * w).sum::<f64>() / total;
        let var: f64 = freqs
            .iter()
            .zip(&weights)
            .map(|(f, w)| (f - mean) * (f - mean) * w)
            .sum::<f64>()
            / total;
        assert!(
            (mean - center).abs() <= df,
            "spectral mass centers at {mean}, expected {center} within one bin {df}"
        );
        // The magnitude transform of the Gaussian envelope has standard
        // deviation equal to the bandwidth in Hz.
        let width = var.sqrt();
        assert!(
            (width - bandwidth).abs() <= 0.05 * bandwidth,
            "spectral width {width} vs bandwidth {bandwidth}"
        );
    }

    #[test]
    fn scalar_kernel_reduces_to_damped_cosine() {
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(5.0, 1.5).unwrap(),
                coregionalization: CoregionalizationFactor {
                    b_tilde: DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
                },
            }],
        };
        let times = grid(32, 64.0);
        let k = csm_kernel_matrix(&params, &times).unwrap();
        let nu = (2.0 * std::f64::consts::PI * 1.5).powi(2);
        for i in 0..32 {
            for j in 0..32 {
                let tau: f64 = times[i] - times[j];
                let expected = (-0.5 * nu * tau * tau).exp()
                    * (2.0 * std::f64::consts::PI * 5.0 * tau).cos();
                assert!(
                    (k[(i, j)] - expected).abs() < 1e-12,
                    "entry ({i},{j}): {} vs {expected}",
                    k[(i, j)]
                );
            }
        }
    }

    #[test]
    fn zero_lag_diagonal_blocks_equal_summed_b_diagonals() {
        let params = CsmParams {
            components: (0..2)
                .map(|q| CsmComponent {
                    gaussian: SpectralGaussian::new(4.0 + q as f64, 1.0).unwrap(),
                    coregionalization: random_coreg(3, 2, 0.7, q as u64),
                })
                .collect(),
        };
        let times = grid(8, 32.0);
        let k = csm_kernel_matrix(&params, &times).unwrap();
        let b_total: Vec<f64> = (0..3)
            .map(|c| {
                params
                    .components
                    .iter()
                    .map(|comp| comp.coregionalization.b()[(c, c)].re)
                    .sum()
            })
            .collect();
        for c in 0..3 {
            for i in 0..8 {
                let idx = c * 8 + i;
                assert!(
                    (k[(idx, idx)] - b_total[c]).abs() < 1e-12,
                    "diagonal of channel {c}"
                );
            }
        }
    }

    #[test]
    fn kernel_matrices_are_positive_semidefinite_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        for draw in 0..100 {
            let channels = 1 + (draw % 3);
            let rank = 1 + (draw % channels.min(2));
            let q = 1 + (draw % 3);
            let params = CsmParams {
                components: (0..q)
                    .map(|qi| CsmComponent {
                        gaussian: SpectralGaussian::new(
                            0.5 + 20.0 * rng.random::<f64>(),
                            0.2 + 3.0 * rng.random::<f64>(),
                        )
                        .unwrap(),
                        coregionalization: random_coreg(
                            channels,
                            rank,
                            1.0,
                            1000 + draw as u64 * 10 + qi as u64,
                        ),
                    })
                    .collect(),
            };
            let n = 8 + (draw % 9);
            let times = grid(n, 40.0);
            let k = csm_kernel_matrix(&params, &times).unwrap();
            let trace = k.trace();
            let eigen = k.symmetric_eigenvalues();
            let min = eigen.min();
            assert!(
                min >= -1e-8 * trace.max(1.0),
                "draw {draw}: min eigenvalue {min} vs trace {trace}"
            );
        }
    }

    #[test]
    fn kernel_is_stationary_bit_for_bit_on_shifted_integer_grids() {
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(3.0, 0.8).unwrap(),
                coregionalization: random_coreg(2, 1, 0.9, 3),
            }],
        };
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.25).collect();
        let shifted: Vec<f64> = times.iter().map(|t| t + 16.0).collect();
        let k1 = csm_kernel_matrix(&params, &times).unwrap();
        let k2 = csm_kernel_matrix(&params, &shifted).unwrap();
        assert_eq!(k1, k2, "identical lag grids must give identical matrices");
    }

    #[test]
    fn kernel_guard_rejects_oversized_requests() {
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(3.0, 0.8).unwrap(),
                coregionalization: random_coreg(4, 1, 0.5, 4),
            }],
        };
        let times = grid(2000, 1000.0);
        assert!(matches!(
            csm_kernel_matrix(&params, &times),
            Err(Error::SizeLimit(_))
        ));
        assert!(csm_kernel_matrix_with_limit(&params, &times, 8000).is_ok());
    }

    fn toy_model(l: usize, windows: usize, seed: u64) -> CsfaModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors: Vec<CsmParams> = (0..l)
            .map(|fi| CsmParams {
                components: vec![CsmComponent {
                    gaussian: SpectralGaussian::new(5.0 + 7.0 * fi as f64, 1.5).unwrap(),
                    coregionalization: random_coreg(2, 2, 0.8, seed + fi as u64),
                }],
            })
            .collect();
        CsfaModel {
            factors,
            noise_precision: 20.0,
            scores: DMatrix::from_fn(l, windows, |_, _| rng.random::<f64>() + 0.2),
            times: grid(24, 48.0),
            encoder: None,
        }
    }

    #[test]
    fn zero_scores_give_pure_noise_covariance() {
        let mut model = toy_model(2, 3, 7);
        model.scores.fill(0.0);
        let sigma = window_covariance(&model, 1).unwrap();
        let expected = DMatrix::from_diagonal_element(48, 48, 1.0 / 20.0);
        assert_eq!(sigma, expected);
    }

    #[test]
    fn single_factor_covariance_is_scaled_kernel_plus_noise() {
        let mut model = toy_model(1, 2, 8);
        model.scores[(0, 0)] = 1.7;
        let sigma = window_covariance(&model, 0).unwrap();
        let k = csm_kernel_matrix(&model.factors[0], &model.times).unwrap();
        let expected = k * (1.7 * 1.7) + DMatrix::from_diagonal_element(48, 48, 1.0 / 20.0);
        let diff = (&sigma - &expected).abs().max();
        assert!(diff < 1e-14, "covariance assembly drift {diff}");
    }

    #[test]
    fn scaling_data_raises_nll() {
        let model = toy_model(2, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = DVector::from_fn(48, |_, _| rng.sample::<f64, _>(StandardNormal));
        let base = gp_nll(&model, 0, &y).unwrap();
        let scaled = gp_nll(&model, 0, &(&y * 10.0)).unwrap();
        assert!(
            scaled > base,
            "inflating the data must look less likely: {base} vs {scaled}"
        );
    }

    #[test]
    fn nll_score_gradient_matches_finite_differences() {
        let model = toy_model(3, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = DVector::from_fn(48, |_, _| 0.8 * rng.sample::<f64, _>(StandardNormal));
        let w = 2;
        let analytic = gp_nll_score_gradient(&model, w, &y).unwrap();
        for fi in 0..3 {
            let h = 1e-6;
            let mut plus = model.clone();
            plus.scores[(fi, w)] += h;
            let mut minus = model.clone();
            minus.scores[(fi, w)] -= h;
            let fd = (gp_nll(&plus, w, &y).unwrap() - gp_nll(&minus, w, &y).unwrap()) / (2.0 * h);
            let err = (analytic[fi] - fd).abs() / (analytic[fi].abs() + fd.abs()).max(1e-4);
            assert!(
                err < 1e-4,
                "score {fi}: analytic {} vs fd {fd}",
                analytic[fi]
            );
        }
    }

    #[test]
    fn fitted_scores_beat_zero_scores_and_stay_nonnegative() {
        let model = toy_model(2, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ys = DMatrix::from_fn(48, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (scores, nlls) = fit_scores(&model, &ys, 40).unwrap();
        assert!(scores.iter().all(|s| *s >= 0.0), "projection keeps scores feasible");
        for w in 0..3 {
            let mut zeroed = model.clone();
            zeroed.scores = DMatrix::zeros(2, 3);
            let zero_nll = gp_nll(&zeroed, w, &ys.column(w).into_owned()).unwrap();
            assert!(
                nlls[w] <= zero_nll + 1e-9,
                "window {w}: fitted NLL {} vs zero-score NLL {zero_nll}",
                nlls[w]
            );
        }
    }

    #[test]
    fn encoded_gradients_match_finite_differences() {
        // Tiny instance: C=2, N=10, L=2, Q=1, R=1, 6 windows.
        let channels = 2;
        let times = grid(10, 32.0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let windows = DMatrix::from_fn(20, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let features = power_feature_matrix(&windows, channels, 2).unwrap();
        let labels = vec![true, false, true, false, true, false];
        let mu = 3.0;
        let eta = 15.0;
        let kernel = KernelState {
            factors: (0..2)
                .map(|fi| {
                    vec![ComponentState {
                        rho_center: softplus_inverse(4.0 + 3.0 * fi as f64),
                        rho_bandwidth: softplus_inverse(1.2),
                        b_tilde: DMatrix::from_fn(channels, 1, |_, _| {
                            Complex64::new(
                                0.6 * rng.sample::<f64, _>(StandardNormal),
                                0.6 * rng.sample::<f64, _>(StandardNormal),
                            )
                        }),
                    }]
                })
                .collect(),
        };
        let spec = EncoderSpec {
            layout: EncoderLayout::Affine,
            hidden_units: 0,
        };
        let encoder = Encoder::random(&spec, features.nrows(), 2, 5);
        let beta = DVector::from_vec(vec![0.7, -0.4]);
        let state = EncodedState {
            kernel,
            encoder,
            beta,
            intercept: 0.2,
        };
        let idx: Vec<usize> = (0..6).collect();
        let (grads, _) = encoded_loss_and_grads(
            &state, &windows, &times, channels, &features, &labels, &idx, mu, eta, 1.0,
        )
        .unwrap();

        let h = 1e-6;
        let check = |name: &str, analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-4);
            assert!(err < 1e-4, "{name}: analytic {analytic} vs fd {fd}");
        };
        let loss_at = |state: &EncodedState| {
            encoded_loss_only(state, &windows, &times, channels, &features, &labels, mu, eta)
                .unwrap()
        };

        let kernel_flat = state.kernel.flatten();
        for i in 0..kernel_flat.len() {
            let mut plus = state.kernel.clone();
            let mut minus = state.kernel.clone();
            let mut fp = kernel_flat.clone();
            fp[i] += h;
            plus.assign_from_flat(&fp);
            let mut fm = kernel_flat.clone();
            fm[i] -= h;
            minus.assign_from_flat(&fm);
            let state_p = EncodedState {
                kernel: plus,
                encoder: state.encoder.clone(),
                beta: state.beta.clone(),
                intercept: state.intercept,
            };
            let state_m = EncodedState {
                kernel: minus,
                encoder: state.encoder.clone(),
                beta: state.beta.clone(),
                intercept: state.intercept,
            };
            check(
                &format!("kernel[{i}]"),
                grads.kernel[i],
                loss_at(&state_p),
                loss_at(&state_m),
            );
        }
        let encoder_flat = state.encoder.flatten();
        for i in 0..encoder_flat.len() {
            let mut plus = state.encoder.clone();
            let mut minus = state.encoder.clone();
            let mut fp = encoder_flat.clone();
            fp[i] += h;
            plus.assign_from_flat(&fp);
            let mut fm = encoder_flat.clone();
            fm[i] -= h;
            minus.assign_from_flat(&fm);
            let state_p = EncodedState {
                kernel: state.kernel.clone(),
                encoder: plus,
                beta: state.beta.clone(),
                intercept: state.intercept,
            };
            let state_m = EncodedState {
                kernel: state.kernel.clone(),
                encoder: minus,
                beta: state.beta.clone(),
                intercept: state.intercept,
            };
            check(
                &format!("encoder[{i}]"),
                grads.encoder[i],
                loss_at(&state_p),
                loss_at(&state_m),
            );
        }
        for i in 0..2 {
            let mut bp = state.beta.clone();
            bp[i] += h;
            let mut bm = state.beta.clone();
            bm[i] -= h;
            let state_p = EncodedState {
                kernel: state.kernel.clone(),
                encoder: state.encoder.clone(),
                beta: bp,
                intercept: state.intercept,
            };
            let state_m = EncodedState {
                kernel: state.kernel.clone(),
                encoder: state.encoder.clone(),
                beta: bm,
                intercept: state.intercept,
            };
            check(
                &format!("beta[{i}]"),
                grads.beta[i],
                loss_at(&state_p),
                loss_at(&state_m),
            );
        }
        let state_p = EncodedState {
            kernel: state.kernel.clone(),
            encoder: state.encoder.clone(),
            beta: state.beta.clone(),
            intercept: state.intercept + h,
        };
        let state_m = EncodedState {
            kernel: state.kernel.clone(),
            encoder: state.encoder.clone(),
            beta: state.beta.clone(),
            intercept: state.intercept - h,
        };
        check("intercept", grads.intercept, loss_at(&state_p), loss_at(&state_m));
    }

    #[test]
    fn empirical_covariance_of_generated_windows_matches_the_analytic_one() {
        let config = CsmSynthConfig {
            channels: 2,
            rank: 1,
            window_length: 16,
            sample_rate_hz: 32.0,
            windows: 5000,
            noise_precision: 30.0,
            seed: 31,
            ..CsmSynthConfig::default()
        };
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(6.0, 1.2).unwrap(),
                coregionalization: random_coreg(2, 1, 0.8, 31),
            }],
        };
        let scores = DMatrix::from_element(1, config.windows, 1.2);
        let (windows, times) = gen_csm(&config, std::slice::from_ref(&params), &scores).unwrap();
        let model = CsfaModel {
            factors: vec![params],
            noise_precision: config.noise_precision,
            scores,
            times,
            encoder: None,
        };
        let analytic = window_covariance(&model, 0).unwrap();
        let nc = analytic.nrows();
        let mut empirical = DMatrix::zeros(nc, nc);
        for w in 0..config.windows {
            let y = windows.column(w);
            empirical += &y * y.transpose();
        }
        empirical /= config.windows as f64;
        let rel = (&empirical - &analytic).norm() / analytic.norm();
        assert!(
            rel < 0.10,
            "5000-draw covariance off by {rel} relative Frobenius"
        );
    }

    #[test]
    fn mean_nll_of_model_draws_sits_at_the_entropy_rate() {
        let config = CsmSynthConfig {
            channels: 2,
            rank: 1,
            window_length: 16,
            sample_rate_hz: 32.0,
            windows: 500,
            noise_precision: 30.0,
            seed: 33,
            ..CsmSynthConfig::default()
        };
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(5.0, 1.0).unwrap(),
                coregionalization: random_coreg(2, 1, 0.7, 33),
            }],
        };
        let scores = DMatrix::from_element(1, config.windows, 1.0);
        let (windows, times) = gen_csm(&config, std::slice::from_ref(&params), &scores).unwrap();
        let model = CsfaModel {
            factors: vec![params],
            noise_precision: config.noise_precision,
            scores,
            times,
            encoder: None,
        };
        let mean_nll = mean_gp_nll(&model, &windows).unwrap();
        let sigma = window_covariance(&model, 0).unwrap();
        let nc = sigma.nrows() as f64;
        let chol = sigma.cholesky().expect("analytic covariance is PD");
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        // Expected NLL of a draw from the model equals the differential
        // entropy: ½(NC·ln(2π) + lndet Σ + NC). The per-window NLL varies
        // like half a chi-square with NC degrees of freedom.
        let entropy = 0.5 * (nc * (2.0 * std::f64::consts::PI).ln() + log_det + nc);
        let se = (nc / 2.0).sqrt() / (config.windows as f64).sqrt();
        assert!(
            (mean_nll - entropy).abs() <= 3.0 * se,
            "mean NLL {mean_nll} vs entropy {entropy}, tolerance {}",
            3.0 * se
        );
    }

    #[test]
    fn nll_improves_toward_the_generating_scores() {
        let config = CsmSynthConfig {
            channels: 2,
            rank: 1,
            window_length: 24,
            sample_rate_hz: 48.0,
            windows: 20,
            noise_precision: 60.0,
            seed: 35,
            ..CsmSynthConfig::default()
        };
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(7.0, 1.4).unwrap(),
                coregionalization: random_coreg(2, 1, 0.9, 35),
            }],
        };
        let truth = 1.5;
        let scores = DMatrix::from_element(1, config.windows, truth);
        let (windows, times) = gen_csm(&config, std::slice::from_ref(&params), &scores).unwrap();
        let nll_at = |level: f64| {
            let model = CsfaModel {
                factors: vec![params.clone()],
                noise_precision: config.noise_precision,
                scores: DMatrix::from_element(1, config.windows, level),
                times: times.clone(),
                encoder: None,
            };
            mean_gp_nll(&model, &windows).unwrap()
        };
        let at_zero = nll_at(0.0);
        let halfway = nll_at(0.5 * truth);
        let at_truth = nll_at(truth);
        assert!(
            halfway < at_zero,
            "moving halfway toward truth must help: {at_zero} vs {halfway}"
        );
        assert!(
            at_truth < halfway,
            "the generating scores must fit best: {halfway} vs {at_truth}"
        );
    }

    #[test]
    fn score_search_recovers_the_generating_scores_on_one_factor_data() {
        // Power spread over three bands and a rank-2 coregionalization
        // give each window enough effective degrees of freedom for a
        // per-window scale estimate at the stated tolerance.
        let config = CsmSynthConfig {
            channels: 2,
            rank: 2,
            window_length: 64,
            sample_rate_hz: 64.0,
            windows: 5,
            noise_precision: 100.0,
            seed: 37,
            ..CsmSynthConfig::default()
        };
        let params = CsmParams {
            components: [6.0, 14.0, 22.0]
                .iter()
                .enumerate()
                .map(|(i, &center)| CsmComponent {
                    gaussian: SpectralGaussian::new(center, 2.0).unwrap(),
                    coregionalization: random_coreg(2, 2, 0.7, 37 + i as u64),
                })
                .collect(),
        };
        let truth = [0.8, 1.5, 2.2, 1.0, 1.8];
        let scores = DMatrix::from_row_slice(1, 5, &truth);
        let (windows, times) = gen_csm(&config, std::slice::from_ref(&params), &scores).unwrap();
        let model = CsfaModel {
            factors: vec![params],
            noise_precision: config.noise_precision,
            scores: DMatrix::zeros(1, 5),
            times,
            encoder: None,
        };
        let (fitted, _) = fit_scores(&model, &windows, 100).unwrap();
        for (w, &target) in truth.iter().enumerate() {
            let rel = (fitted[(0, w)] - target).abs() / target;
            assert!(
                rel < 0.15,
                "window {w}: recovered {} vs generating {target}",
                fitted[(0, w)]
            );
        }
    }

    /// Two-factor toy data where only factor 2's score level carries the
    /// label. Used by the encoded-training tests below.
    fn labeled_two_factor_data(
        seed: u64,
    ) -> (CsmSynthConfig, Vec<CsmParams>, DMatrix<f64>, Vec<bool>) {
        let config = CsmSynthConfig {
            channels: 2,
            rank: 1,
            window_length: 32,
            sample_rate_hz: 64.0,
            windows: 120,
            noise_precision: 50.0,
            seed,
            ..CsmSynthConfig::default()
        };
        let factors = vec![
            CsmParams {
                components: vec![CsmComponent {
                    gaussian: SpectralGaussian::new(8.0, 1.5).unwrap(),
                    coregionalization: random_coreg(2, 1, 0.9, seed + 1),
                }],
            },
            CsmParams {
                components: vec![CsmComponent {
                    gaussian: SpectralGaussian::new(19.0, 1.5).unwrap(),
                    coregionalization: random_coreg(2, 1, 0.9, seed + 2),
                }],
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let labels: Vec<bool> = (0..config.windows).map(|_| rng.random::<bool>()).collect();
        let scores = DMatrix::from_fn(2, config.windows, |fi, w| {
            if fi == 0 {
                0.6 + 0.8 * rng.random::<f64>()
            } else if labels[w] {
                1.6 + 0.4 * rng.random::<f64>()
            } else {
                0.15 + 0.1 * rng.random::<f64>()
            }
        });
        (config, factors, scores, labels)
    }

    #[test]
    fn encoded_training_separates_classes_and_recovers_centers() {
        let (config, factors, scores, labels) = labeled_two_factor_data(41);
        let (windows, times) = gen_csm(&config, &factors, &scores).unwrap();
        let features = power_feature_matrix(&windows, config.channels, 4).unwrap();
        let (train_idx, test_idx) = stratified_split(&labels, 2.0 / 3.0, 41).unwrap();
        let gather = |m: &DMatrix<f64>, idx: &[usize]| {
            DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
        };
        let train_windows = gather(&windows, &train_idx);
        let train_features = gather(&features, &train_idx);
        let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
        let cfg = OptimizerConfig {
            step_size: 3e-3,
            iterations: 500,
            batch_size: 16,
            seed: 0,
            ..OptimizerConfig::default()
        };
        let options = CsfaOptions {
            components_per_factor: 1,
            rank: 1,
            noise_precision: 50.0,
        };
        let (model, head) = fit_encoded_csfa(
            &train_windows,
            &times,
            &train_features,
            &train_labels,
            2,
            5.0,
            &cfg,
            &options,
        )
        .unwrap();

        let test_features = gather(&features, &test_idx);
        let test_labels: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();
        let test_scores = model.encoder.as_ref().unwrap().forward(&test_features);
        let probs = head.predict_proba(&test_scores).unwrap();
        let test_auc = auc(&probs, &test_labels).unwrap();
        assert!(
            test_auc >= 0.85,
            "encoded model should separate the classes, AUC {test_auc}"
        );

        let mut fitted_centers: Vec<f64> = model
            .factors
            .iter()
            .map(|f| f.components[0].gaussian.center_hz)
            .collect();
        fitted_centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (fitted, target) in fitted_centers.iter().zip([8.0, 19.0]) {
            assert!(
                (fitted - target).abs() <= 2.0,
                "fitted center {fitted} Hz vs generating {target} Hz"
            );
        }
    }

    #[test]
    fn zero_supervision_strength_leaves_the_head_untouched() {
        let (config, factors, scores, labels) = labeled_two_factor_data(43);
        let (windows, times) = gen_csm(&config, &factors, &scores).unwrap();
        let features = power_feature_matrix(&windows, config.channels, 2).unwrap();
        let cfg = OptimizerConfig {
            iterations: 50,
            batch_size: 8,
            seed: 1,
            ..OptimizerConfig::default()
        };
        let options = CsfaOptions {
            components_per_factor: 1,
            rank: 1,
            noise_precision: 50.0,
        };
        let (_, head) =
            fit_encoded_csfa(&windows, &times, &features, &labels, 2, 0.0, &cfg, &options)
                .unwrap();
        assert!(
            head.beta.iter().all(|b| *b == 0.0),
            "with zero supervision the head weights must never move"
        );
        let base_rate = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
        let expected = (base_rate / (1.0 - base_rate)).ln();
        assert_eq!(
            head.intercept, expected,
            "the intercept stays at the base-rate logit"
        );
    }

    #[test]
    fn off_diagonal_coregionalization_sets_the_coherence_level() {
        // For B = [[1, ρ], [ρ, 1]] the magnitude-squared coherence at the
        // component's band is ρ², tying the kernel's cross-channel terms
        // to the spectral coherence estimate.
        let rho = 0.7;
        let b = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let chol = b.cholesky().expect("valid coregionalization");
        let b_tilde = chol.l().map(|v| Complex64::new(v, 0.0));
        let params = CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(8.0, 1.0).unwrap(),
                coregionalization: CoregionalizationFactor { b_tilde },
            }],
        };
        let config = CsmSynthConfig {
            channels: 2,
            rank: 2,
            window_length: 512,
            sample_rate_hz: 64.0,
            windows: 8,
            noise_precision: 1e4,
            seed: 47,
            ..CsmSynthConfig::default()
        };
        let scores = DMatrix::from_element(1, config.windows, 1.0);
        let (windows, _) = gen_csm(&config, std::slice::from_ref(&params), &scores).unwrap();
        let n = config.window_length;
        let welch = WelchConfig::default_for(n);
        let mut mean_coh = 0.0;
        let mut freq_checked = false;
        for w in 0..config.windows {
            let samples = DMatrix::from_fn(2, n, |c, i| windows[(c * n + i, w)]);
            let window = TimeSeriesWindow::new(samples, config.sample_rate_hz, w as u64).unwrap();
            let coh = ms_coherence(&window, &welch).unwrap();
            let bin = coh
                .frequencies_hz
                .iter()
                .position(|f| (f - 8.0).abs() < 1e-9)
                .expect("8 Hz lands on a Welch bin");
            if !freq_checked {
                assert_eq!(coh.pairs, vec![(0, 1)]);
                freq_checked = true;
            }
            mean_coh += coh.coherence[(0, bin)];
        }
        mean_coh /= config.windows as f64;
        assert!(
            (mean_coh - rho * rho).abs() < 0.1,
            "coherence {mean_coh} at the component band vs ρ² = {}",
            rho * rho
        );
    }
}
