//! Seeded generators for every synthetic experiment: the misspecified
//! linear factor study, pseudo-synthetic image data built from a base NMF
//! fit, and toy multichannel signals drawn from cross-spectral mixture
//! kernels. All generators are pure functions of their configuration and
//! seed; identical inputs give bit-identical outputs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csm::{cholesky_with_jitter, csm_kernel_matrix, CsmParams};
use crate::error::{Error, Result};
use crate::nmf;

/// Multiplicative-update sweeps for the base factorization behind the
/// pseudo-synthetic image data.
pub const BASE_FIT_SWEEPS: usize = 300;

/// Configuration of the misspecified linear factor study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSynthConfig {
    pub p: usize,
    pub q: usize,
    pub l_true: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_x: f64,
    pub noise_y: f64,
    pub top_factor_unpredictive: bool,
    pub seed: u64,
}

impl Default for LinearSynthConfig {
    fn default() -> Self {
        LinearSynthConfig {
            p: 20,
            q: 1,
            l_true: 3,
            n_train: 200,
            n_test: 1000,
            noise_x: 0.5,
            noise_y: 0.5,
            top_factor_unpredictive: true,
            seed: 0,
        }
    }
}

impl LinearSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.l_true == 0 {
            return Err(Error::InvalidConfig(
                "dimensions must be at least 1".into(),
            ));
        }
        if self.l_true > self.p {
            return Err(Error::InvalidConfig(format!(
                "true factor count {} exceeds predictor count {}",
                self.l_true, self.p
            )));
        }
        if self.n_train < 2 || self.n_test < 2 {
            return Err(Error::InvalidConfig(
                "train and test counts must be at least 2".into(),
            ));
        }
        for (name, v) in [("noise_x", self.noise_x), ("noise_y", self.noise_y)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a non-negative finite std dev, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`gen_linear`], ground truth included.
#[derive(Debug, Clone)]
pub struct LinearSynthData {
    pub x_train: DMatrix<f64>,
    pub y_train: DMatrix<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DMatrix<f64>,
    /// p×L generating loadings with column norms L : L−1 : … : 1.
    pub loadings: DMatrix<f64>,
    /// q×L generating outcome weights; column 1 is exactly zero when the
    /// top factor is unpredictive.
    pub outcome_weights: DMatrix<f64>,
    pub scores_train: DMatrix<f64>,
    pub scores_test: DMatrix<f64>,
}

/// Draw from the linear generative model x = W₀s + ε_x, y = D₀s + ε_y
/// with standard-normal scores. The factor-variance profile makes factor
/// 1 strictly dominant in x; with `top_factor_unpredictive` that factor
/// carries no outcome signal at all.
pub fn gen_linear(config: &LinearSynthConfig) -> Result<LinearSynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let l = config.l_true;
    let mut loadings = DMatrix::zeros(config.p, l);
    for j in 0..l {
        let mut col = DVector::from_fn(config.p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::NumericalError("degenerate loading draw".into()));
        }
        col *= (l - j) as f64 / norm;
        loadings.set_column(j, &col);
    }
    let mut outcome_weights =
        DMatrix::from_fn(config.q, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    if config.top_factor_unpredictive {
        for i in 0..config.q {
            outcome_weights[(i, 0)] = 0.0;
        }
    }

    let draw_split = |n: usize, rng: &mut ChaCha8Rng| {
        let scores = DMatrix::from_fn(l, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &loadings * &scores;
        for v in x.iter_mut() {
            *v += config.noise_x * rng.sample::<f64, _>(StandardNormal);
        }
        let mut y = &outcome_weights * &scores;
        for v in y.iter_mut() {
            *v += config.noise_y * rng.sample::<f64, _>(StandardNormal);
        }
        (x, y, scores)
    };
    let (x_train, y_train, scores_train) = draw_split(config.n_train, &mut rng);
    let (x_test, y_test, scores_test) = draw_split(config.n_test, &mut rng);
    Ok(LinearSynthData {
        x_train,
        y_train,
        x_test,
        y_test,
        loadings,
        outcome_weights,
        scores_train,
        scores_test,
    })
}

/// Binary image-classification task, identified by the two class labels
/// it keeps from a ten-class clothing corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmfTask {
    PulloverShirt,
    TshirtShirt,
    TshirtCoat,
}

impl NmfTask {
    /// (negative, positive) class labels; the second named class is the
    /// positive one.
    pub fn class_pair(&self) -> (u8, u8) {
        match self {
            NmfTask::PulloverShirt => (2, 6),
            NmfTask::TshirtShirt => (0, 6),
            NmfTask::TshirtCoat => (0, 4),
        }
    }

    pub fn all() -> [NmfTask; 3] {
        [NmfTask::PulloverShirt, NmfTask::TshirtShirt, NmfTask::TshirtCoat]
    }

    pub fn name(&self) -> &'static str {
        match self {
            NmfTask::PulloverShirt => "pullover_shirt",
            NmfTask::TshirtShirt => "tshirt_shirt",
            NmfTask::TshirtCoat => "tshirt_coat",
        }
    }
}

/// Configuration of the pseudo-synthetic image study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmfSynthConfig {
    pub base_components: usize,
    pub model_components: usize,
    /// Absolute noise std dev; `None` uses 5% of the mean reconstruction
    /// magnitude.
    pub noise_std: Option<f64>,
    pub task: NmfTask,
    pub seed: u64,
}

impl Default for NmfSynthConfig {
    fn default() -> Self {
        NmfSynthConfig {
            base_components: 40,
            model_components: 5,
            noise_std: None,
            task: NmfTask::PulloverShirt,
            seed: 0,
        }
    }
}

impl NmfSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_components == 0 {
            return Err(Error::InvalidConfig("base components must be at least 1".into()));
        }
        if self.model_components == 0 || self.model_components > self.base_components {
            return Err(Error::InvalidConfig(format!(
                "model components {} must lie in 1..={}",
                self.model_components, self.base_components
            )));
        }
        if let Some(std) = self.noise_std {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "noise std must be non-negative and finite, got {std}"
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`gen_nmf_pseudo`]: the noisy reconstruction, binary labels
/// over the task's two classes, and the generating factorization.
#[derive(Debug, Clone)]
pub struct NmfPseudoData {
    pub x_synth: DMatrix<f64>,
    pub labels: Vec<bool>,
    pub base_loadings: DMatrix<f64>,
    pub base_scores: DMatrix<f64>,
}

/// Build pseudo-synthetic data for one task: keep only the two classes'
/// images, fit an unsupervised base factorization to them, and emit the
/// reconstruction plus additive Gaussian noise clipped at zero. The base
/// scores are the ground truth for reference classifiers.
pub fn gen_nmf_pseudo(
    images: &DMatrix<f64>,
    labels: &[u8],
    config: &NmfSynthConfig,
) -> Result<NmfPseudoData> {
    config.validate()?;
    if labels.len() != images.ncols() {
        return Err(Error::ShapeError(format!(
            "{} labels for {} image columns",
            labels.len(),
            images.ncols()
        )));
    }
    if images.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidData(
            "images must be non-negative and finite".into(),
        ));
    }
    let (neg, pos) = config.task.class_pair();
    let keep: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == neg || y == pos)
        .map(|(i, _)| i)
        .collect();
    let n_pos = keep.iter().filter(|&&i| labels[i] == pos).count();
    if n_pos == 0 || n_pos == keep.len() {
        return Err(Error::InvalidData(format!(
            "task {} needs both classes {neg} and {pos} present",
            config.task.name()
        )));
    }
    let selected = DMatrix::from_fn(images.nrows(), keep.len(), |i, j| images[(i, keep[j])]);
    let binary: Vec<bool> = keep.iter().map(|&i| labels[i] == pos).collect();

    let (base_loadings, base_scores) =
        nmf::fit_unsupervised(&selected, config.base_components, BASE_FIT_SWEEPS, config.seed)?;
    let recon = &base_loadings * &base_scores;
    let noise_std = match config.noise_std {
        Some(std) => std,
        None => 0.05 * recon.iter().sum::<f64>() / recon.len() as f64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let x_synth = recon.map(|r| {
        (r + noise_std * rng.sample::<f64, _>(StandardNormal)).max(0.0)
    });
    Ok(NmfPseudoData {
        x_synth,
        labels: binary,
        base_loadings,
        base_scores,
    })
}

/// Configuration of the toy cross-spectral mixture signal generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsmSynthConfig {
    pub channels: usize,
    pub rank: usize,
    pub components: usize,
    pub window_length: usize,
    pub sample_rate_hz: f64,
    pub windows: usize,
    pub noise_precision: f64,
    pub seed: u64,
}

impl Default for CsmSynthConfig {
    fn default() -> Self {
        CsmSynthConfig {
            channels: 2,
            rank: 2,
            components: 1,
            window_length: 32,
            sample_rate_hz: 64.0,
            windows: 50,
            noise_precision: 50.0,
            seed: 0,
        }
    }
}

impl CsmSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.rank == 0 || self.components == 0 || self.windows == 0 {
            return Err(Error::InvalidConfig("counts must be at least 1".into()));
        }
        if self.rank > self.channels {
            return Err(Error::InvalidConfig(format!(
                "rank {} exceeds channel count {}",
                self.rank, self.channels
            )));
        }
        if self.window_length < 2 {
            return Err(Error::InvalidConfig(
                "window length must be at least 2 samples".into(),
            ));
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !(self.noise_precision > 0.0) || !self.noise_precision.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise precision must be positive, got {}",
                self.noise_precision
            )));
        }
        Ok(())
    }

    /// Shared sampling grid of every window, in seconds.
    pub fn times(&self) -> Vec<f64> {
        (0..self.window_length)
            .map(|i| i as f64 / self.sample_rate_hz)
            .collect()
    }
}

/// Draw `config.windows` independent windows, channel-major rows, column
/// w sampled from N(0, Σ_l s²_wl K_l + η⁻¹I). Returns the windows and the
/// shared time grid.
pub fn gen_csm(
    config: &CsmSynthConfig,
    factors: &[CsmParams],
    scores: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    config.validate()?;
    if factors.is_empty() {
        return Err(Error::InvalidConfig("need at least one factor".into()));
    }
    for params in factors {
        params.validate()?;
        if params.channels() != config.channels {
            return Err(Error::ShapeError(format!(
                "factor has {} channels, config says {}",
                params.channels(),
                config.channels
            )));
        }
    }
    if scores.nrows() != factors.len() || scores.ncols() != config.windows {
        return Err(Error::ShapeError(format!(
            "scores are {}×{}, expected {}×{}",
            scores.nrows(),
            scores.ncols(),
            factors.len(),
            config.windows
        )));
    }
    if scores.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidData("scores must be non-negative".into()));
    }
    let times = config.times();
    let kernels: Vec<DMatrix<f64>> = factors
        .iter()
        .map(|f| csm_kernel_matrix(f, &times))
        .collect::<Result<_>>()?;
    let nc = config.channels * config.window_length;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut windows = DMatrix::zeros(nc, config.windows);
    for w in 0..config.windows {
        let mut sigma = DMatrix::from_diagonal_element(nc, nc, 1.0 / config.noise_precision);
        for (kernel, s) in kernels.iter().zip(scores.column(w).iter()) {
            sigma += kernel * (s * s);
        }
        let chol = cholesky_with_jitter(&sigma).map_err(|_| {
            Error::NumericalError(format!(
                "window {w} covariance is not positive definite; the kernel assembly is broken"
            ))
        })?;
        let z = DVector::from_fn(nc, |_, _| rng.sample::<f64, _>(StandardNormal));
        windows.set_column(w, &(chol.l() * z));
    }
    Ok((windows, times))
}

/// Per-class shuffled split into train and test index lists, both sorted
/// ascending. Every class contributes `train_fraction` of its members
/// (rounded) to the train side.
pub fn stratified_split(
    labels: &[bool],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::InvalidData("cannot split zero observations".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let mut n_train = (idx.len() as f64 * train_fraction).round() as usize;
        // Keep both sides nonempty whenever the class can afford it.
        if idx.len() >= 2 {
            n_train = n_train.clamp(1, idx.len() - 1);
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csm::{CoregionalizationFactor, CsmComponent, SpectralGaussian};
    use num_complex::Complex64;

    #[test]
    fn linear_generator_is_deterministic_per_seed() {
        let config = LinearSynthConfig {
            n_train: 30,
            n_test: 20,
            ..LinearSynthConfig::default()
        };
        let a = gen_linear(&config).unwrap();
        let b = gen_linear(&config).unwrap();
        assert_eq!(a.x_train, b.x_train);
        assert_eq!(a.y_test, b.y_test);
        assert_eq!(a.loadings, b.loadings);
    }

    #[test]
    fn noiseless_square_factor_model_has_full_rank() {
        let config = LinearSynthConfig {
            p: 4,
            l_true: 4,
            n_train: 50,
            n_test: 10,
            noise_x: 0.0,
            noise_y: 0.0,
            top_factor_unpredictive: false,
            ..LinearSynthConfig::default()
        };
        let data = gen_linear(&config).unwrap();
        let svd = data.x_train.clone().svd(false, false);
        let min = svd.singular_values.min();
        let max = svd.singular_values.max();
        assert!(min > 1e-8 * max, "noiseless x should have rank l_true = p");
    }

    #[test]
    fn noiseless_low_rank_data_has_exactly_l_true_directions() {
        let config = LinearSynthConfig {
            p: 6,
            l_true: 2,
            n_train: 40,
            n_test: 10,
            noise_x: 0.0,
            noise_y: 0.0,
            ..LinearSynthConfig::default()
        };
        let data = gen_linear(&config).unwrap();
        let svd = data.x_train.clone().svd(false, false);
        let sv = &svd.singular_values;
        assert!(sv[1] > 1e-8 * sv[0], "two directions carry signal");
        assert!(sv[2] < 1e-10 * sv[0], "third singular value is numerically zero");
    }

    #[test]
    fn unpredictive_top_factor_has_zero_weight_and_negligible_correlation() {
        let config = LinearSynthConfig {
            n_train: 10_000,
            n_test: 10,
            ..LinearSynthConfig::default()
        };
        let data = gen_linear(&config).unwrap();
        for i in 0..config.q {
            assert_eq!(
                data.outcome_weights[(i, 0)],
                0.0,
                "outcome weight on factor 1 is zero by construction"
            );
        }
        let n = config.n_train;
        let y_mean = data.y_train.row(0).sum() / n as f64;
        let s_mean = data.scores_train.row(0).sum() / n as f64;
        let mut cov = 0.0;
        let mut var_y = 0.0;
        let mut var_s = 0.0;
        for j in 0..n {
            let dy = data.y_train[(0, j)] - y_mean;
            let ds = data.scores_train[(0, j)] - s_mean;
            cov += dy * ds;
            var_y += dy * dy;
            var_s += ds * ds;
        }
        let corr = cov / (var_y.sqrt() * var_s.sqrt());
        assert!(
            corr.abs() < 0.05,
            "outcome should not track factor-1 scores, correlation {corr}"
        );
    }

    #[test]
    fn loading_column_norms_follow_the_declining_profile() {
        let data = gen_linear(&LinearSynthConfig {
            n_train: 5,
            n_test: 5,
            ..LinearSynthConfig::default()
        })
        .unwrap();
        for j in 0..3 {
            let norm = data.loadings.column(j).norm();
            let target = (3 - j) as f64;
            assert!(
                (norm - target).abs() < 1e-12,
                "column {j} norm {norm} vs target {target}"
            );
        }
    }

    #[test]
    fn linear_config_validation_rejects_bad_settings() {
        let mut config = LinearSynthConfig::default();
        config.l_true = 25;
        assert!(matches!(gen_linear(&config), Err(Error::InvalidConfig(_))));
        let mut config = LinearSynthConfig::default();
        config.n_train = 1;
        assert!(matches!(gen_linear(&config), Err(Error::InvalidConfig(_))));
        let mut config = LinearSynthConfig::default();
        config.noise_x = -0.1;
        assert!(matches!(gen_linear(&config), Err(Error::InvalidConfig(_))));
    }

    fn tiny_image_corpus(seed: u64) -> (DMatrix<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_per_class = 25;
        let p = 12;
        let mut images = DMatrix::zeros(p, 2 * n_per_class);
        let mut labels = Vec::new();
        // Two class templates plus positive noise keep the matrix
        // non-negative and give the base factorization real structure.
        for j in 0..2 * n_per_class {
            let class = j % 2;
            labels.push(if class == 0 { 2u8 } else { 6u8 });
            for i in 0..p {
                let template = if class == 0 {
                    (i % 4) as f64
                } else {
                    ((p - i) % 5) as f64
                };
                images[(i, j)] = template + rng.random::<f64>();
            }
        }
        (images, labels)
    }

    #[test]
    fn zero_noise_pseudo_data_equals_the_reconstruction_exactly() {
        let (images, labels) = tiny_image_corpus(1);
        let config = NmfSynthConfig {
            base_components: 5,
            model_components: 3,
            noise_std: Some(0.0),
            task: NmfTask::PulloverShirt,
            seed: 4,
        };
        let data = gen_nmf_pseudo(&images, &labels, &config).unwrap();
        let recon = &data.base_loadings * &data.base_scores;
        assert_eq!(data.x_synth, recon, "zero noise must reproduce W·H bit for bit");
    }

    #[test]
    fn pseudo_data_is_non_negative_and_noise_bounded() {
        let (images, labels) = tiny_image_corpus(2);
        let noise_std = 0.3;
        let config = NmfSynthConfig {
            base_components: 5,
            model_components: 3,
            noise_std: Some(noise_std),
            task: NmfTask::PulloverShirt,
            seed: 9,
        };
        let data = gen_nmf_pseudo(&images, &labels, &config).unwrap();
        assert!(data.x_synth.iter().all(|v| *v >= 0.0), "clipping keeps entries non-negative");
        let recon = &data.base_loadings * &data.base_scores;
        let diff_sq: f64 = (&data.x_synth - &recon).iter().map(|d| d * d).sum();
        let budget = 2.0 * noise_std * noise_std * recon.len() as f64;
        assert!(
            diff_sq <= budget,
            "clipped noise energy {diff_sq} exceeds twice its expectation {budget}"
        );
    }

    #[test]
    fn pseudo_data_requires_both_task_classes() {
        let (images, mut labels) = tiny_image_corpus(3);
        for y in labels.iter_mut() {
            *y = 2;
        }
        let config = NmfSynthConfig {
            base_components: 4,
            model_components: 2,
            noise_std: Some(0.1),
            task: NmfTask::PulloverShirt,
            seed: 0,
        };
        assert!(matches!(
            gen_nmf_pseudo(&images, &labels, &config),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn pseudo_data_is_deterministic_per_seed() {
        let (images, labels) = tiny_image_corpus(4);
        let config = NmfSynthConfig {
            base_components: 4,
            model_components: 2,
            noise_std: None,
            task: NmfTask::PulloverShirt,
            seed: 11,
        };
        let a = gen_nmf_pseudo(&images, &labels, &config).unwrap();
        let b = gen_nmf_pseudo(&images, &labels, &config).unwrap();
        assert_eq!(a.x_synth, b.x_synth);
        assert_eq!(a.labels, b.labels);
    }

    fn one_component_params(channels: usize, center_hz: f64, seed: u64) -> CsmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_tilde = DMatrix::from_fn(channels, 1, |_, _| {
            Complex64::new(
                0.5 + rng.random::<f64>(),
                0.5 * rng.random::<f64>(),
            )
        });
        CsmParams {
            components: vec![CsmComponent {
                gaussian: SpectralGaussian::new(center_hz, 1.0).unwrap(),
                coregionalization: CoregionalizationFactor { b_tilde },
            }],
        }
    }

    #[test]
    fn csm_generator_is_deterministic_per_seed() {
        let config = CsmSynthConfig {
            windows: 5,
            ..CsmSynthConfig::default()
        };
        let params = [one_component_params(2, 8.0, 7)];
        let scores = DMatrix::from_element(1, 5, 1.0);
        let (a, _) = gen_csm(&config, &params, &scores).unwrap();
        let (b, _) = gen_csm(&config, &params, &scores).unwrap();
        assert_eq!(a, b, "same seed must reproduce windows bit for bit");
    }

    #[test]
    fn huge_noise_precision_and_zero_scores_give_a_silent_floor() {
        let config = CsmSynthConfig {
            windows: 20,
            noise_precision: 1e9,
            ..CsmSynthConfig::default()
        };
        let params = [one_component_params(2, 8.0, 8)];
        let scores = DMatrix::zeros(1, 20);
        let (windows, _) = gen_csm(&config, &params, &scores).unwrap();
        let n = config.window_length;
        for c in 0..config.channels {
            let mut var = 0.0;
            let mut count = 0.0;
            for w in 0..config.windows {
                for i in 0..n {
                    let v = windows[(c * n + i, w)];
                    var += v * v;
                    count += 1.0;
                }
            }
            var /= count;
            assert!(var < 1e-6, "channel {c} variance {var} above the noise floor");
        }
    }

    #[test]
    fn generated_periodogram_peaks_at_the_component_center() {
        let center_hz = 8.0;
        let config = CsmSynthConfig {
            channels: 1,
            rank: 1,
            window_length: 64,
            sample_rate_hz: 32.0,
            windows: 200,
            noise_precision: 100.0,
            seed: 21,
            ..CsmSynthConfig::default()
        };
        let params = [one_component_params(1, center_hz, 9)];
        let scores = DMatrix::from_element(1, 200, 2.0);
        let (windows, _) = gen_csm(&config, &params, &scores).unwrap();
        let n = config.window_length;
        let mut planner = rustfft::FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut mean_power = vec![0.0; n / 2 + 1];
        for w in 0..config.windows {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new(windows[(i, w)], 0.0))
                .collect();
            fft.process(&mut buf);
            for (k, p) in mean_power.iter_mut().enumerate() {
                *p += buf[k].norm_sqr();
            }
        }
        let df = config.sample_rate_hz / n as f64;
        let peak = mean_power
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        let expected = (center_hz / df).round() as usize;
        assert!(
            peak.abs_diff(expected) <= 1,
            "average periodogram peaks at bin {peak} ({} Hz), expected near {expected}",
            peak as f64 * df
        );
    }

    #[test]
    fn csm_generator_rejects_shape_mismatches() {
        let config = CsmSynthConfig::default();
        let params = [one_component_params(2, 8.0, 10)];
        let bad_scores = DMatrix::from_element(2, config.windows, 1.0);
        assert!(matches!(
            gen_csm(&config, &params, &bad_scores),
            Err(Error::ShapeError(_))
        ));
        let wrong_channels = [one_component_params(3, 8.0, 11)];
        let scores = DMatrix::from_element(1, config.windows, 1.0);
        assert!(matches!(
            gen_csm(&config, &wrong_channels, &scores),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn stratified_split_respects_classes_and_is_deterministic() {
        let labels: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let (train, test) = stratified_split(&labels, 0.8, 3).unwrap();
        let (train2, _) = stratified_split(&labels, 0.8, 3).unwrap();
        assert_eq!(train, train2, "same seed gives the same split");
        assert_eq!(train.len() + test.len(), 50);
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>(), "split covers every index once");
        let pos_train = train.iter().filter(|&&i| labels[i]).count();
        let pos_test = test.iter().filter(|&&i| labels[i]).count();
        assert_eq!(pos_train, 8, "80% of the 10 positives go to train");
        assert_eq!(pos_test, 2);
    }

    #[test]
    fn stratified_split_rejects_degenerate_fractions() {
        let labels = vec![true, false, true, false];
        assert!(matches!(
            stratified_split(&labels, 0.0, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            stratified_split(&labels, 1.0, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            stratified_split(&[], 0.5, 0),
            Err(Error::InvalidData(_))
        ));
    }
}
