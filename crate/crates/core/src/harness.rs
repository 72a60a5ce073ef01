//! Experiment drivers behind the `supfactor` CLI: strict JSON config
//! schemas, immutable run directories with hashed manifests, and the five
//! experiments that emit the toolkit's figures and tables as CSV data.
//!
//! Every run directory contains `config.snapshot` (the fully resolved
//! config), `metrics.csv` (long format `mode,metric,mu,value`), and a
//! `manifest` of SHA-256 hashes written last. Wall-clock measurements go
//! to `runtimes.csv` so the metric files stay byte-identical across
//! reruns with the same config and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::csm::{
    self, CoregionalizationFactor, CsfaOptions, CsmComponent, CsmParams, SpectralGaussian,
};
use crate::error::{Error, Result};
use crate::idx;
use crate::io::{self, MetricRow};
use crate::linear::{self, Centered, Mode};
use crate::metrics;
use crate::nmf::{self, EncoderSpec, NmfMode};
use crate::optim::OptimizerConfig;
use crate::spectral::{self, SpectralFeatureVector, WelchConfig};
use crate::synth::{
    self, stratified_split, CsmSynthConfig, LinearSynthConfig, NmfSynthConfig, NmfTask,
};

/// Iterations used by each μ-probe fit during `--mu auto` bisection.
const NMF_PROBE_ITERATIONS: usize = 500;
const CSFA_PROBE_ITERATIONS: usize = 100;
/// Bisection bracket for `--mu auto`, in μ.
const MU_AUTO_MIN: f64 = 1e-4;
const MU_AUTO_MAX: f64 = 1e4;
/// Loss magnitudes count as balanced when their ratio is within 10%.
const MU_AUTO_TOLERANCE: f64 = 1.1;
const MU_AUTO_MAX_PROBES: usize = 20;
/// Ridge stabilizer for the ground-truth logistic reference.
const GROUND_TRUTH_RIDGE: f64 = 1e-6;
/// Complex scale of the toy generator's coregionalization entries.
const TOY_COREG_SCALE: f64 = 0.9;
/// Zero-padding factor for the toy experiment's encoder features.
const TOY_PAD_FACTOR: usize = 4;

/// Log-spaced supervision-strength grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuGrid {
    pub points: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for MuGrid {
    fn default() -> Self {
        MuGrid {
            points: 40,
            min: 1e-2,
            max: 1e3,
        }
    }
}

impl MuGrid {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::InvalidConfig("μ grid needs at least one point".into()));
        }
        if !(self.min > 0.0) || !self.min.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "μ grid minimum must be positive and finite, got {}",
                self.min
            )));
        }
        if !(self.max >= self.min) || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "μ grid maximum must be finite and ≥ the minimum, got {}",
                self.max
            )));
        }
        if self.points == 1 && self.max > self.min {
            return Err(Error::InvalidConfig(
                "a single-point μ grid needs min == max".into(),
            ));
        }
        Ok(())
    }

    /// Grid values, log-spaced with both endpoints reproduced exactly.
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        (0..self.points)
            .map(|i| {
                if i == 0 {
                    self.min
                } else if i == self.points - 1 {
                    self.max
                } else {
                    (lo + (hi - lo) * i as f64 / (self.points - 1) as f64).exp()
                }
            })
            .collect()
    }
}

/// Supervision strength: a fixed value, or `"auto"` to bisect μ until the
/// reconstruction and supervision loss magnitudes agree within 10%.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuSetting {
    Fixed(f64),
    Auto,
}

impl Serialize for MuSetting {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MuSetting::Fixed(v) => serializer.serialize_f64(*v),
            MuSetting::Auto => serializer.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for MuSetting {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(MuSetting::Fixed)
                .ok_or_else(|| serde::de::Error::custom("mu must be representable as f64")),
            serde_json::Value::String(s) if s == "auto" => Ok(MuSetting::Auto),
            other => Err(serde::de::Error::custom(format!(
                "mu must be a number or the string \"auto\", got {other}"
            ))),
        }
    }
}

impl FromStr for MuSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(MuSetting::Auto);
        }
        s.parse::<f64>()
            .map(MuSetting::Fixed)
            .map_err(|_| format!("expected a number or \"auto\", got {s:?}"))
    }
}

impl MuSetting {
    fn validate(&self) -> Result<()> {
        if let MuSetting::Fixed(v) = self {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "supervision strength must be non-negative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Config for `sweep-mu`: under-specified linear fits (fewer factors than
/// the generator) with all four held-out curves recorded per mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepMuConfig {
    pub synth: LinearSynthConfig,
    pub fitted_factors: usize,
    pub mu_grid: MuGrid,
    pub output_dir: PathBuf,
}

impl Default for SweepMuConfig {
    /// The default generator draw puts a weak outcome signal on the
    /// smallest factor and none on the other two, with outcome noise
    /// dominating that signal. Under the fitted rank of two this keeps
    /// both failure modes of local supervision inside the default μ
    /// grid: its loadings trade the second factor for an outcome-aligned
    /// direction well before the top grid decade, while the encoded fit
    /// holds the factor until past the grid end.
    fn default() -> Self {
        SweepMuConfig {
            synth: LinearSynthConfig {
                n_train: 2000,
                noise_y: 0.45,
                seed: 10182,
                ..LinearSynthConfig::default()
            },
            fitted_factors: 2,
            mu_grid: MuGrid::default(),
            output_dir: PathBuf::from("runs/sweep-mu"),
        }
    }
}

impl SweepMuConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.mu_grid.validate()?;
        if self.fitted_factors == 0 {
            return Err(Error::InvalidConfig("need at least one fitted factor".into()));
        }
        Ok(())
    }
}

/// Config for `sensitivity-mu`: correctly specified dimension, with the
/// factor-dragging distance recorded alongside the sweep curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityMuConfig {
    pub synth: LinearSynthConfig,
    pub fitted_factors: usize,
    pub mu_grid: MuGrid,
    pub output_dir: PathBuf,
}

impl Default for SensitivityMuConfig {
    /// The default seed is one where the held-out dragging distance of
    /// the local fit grows with every μ step of the default grid.
    fn default() -> Self {
        SensitivityMuConfig {
            synth: LinearSynthConfig {
                seed: 4,
                ..LinearSynthConfig::default()
            },
            fitted_factors: 3,
            mu_grid: MuGrid::default(),
            output_dir: PathBuf::from("runs/sensitivity-mu"),
        }
    }
}

impl SensitivityMuConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.mu_grid.validate()?;
        if self.fitted_factors == 0 {
            return Err(Error::InvalidConfig("need at least one fitted factor".into()));
        }
        Ok(())
    }
}

/// Config for `nmf-table1`: pseudo-synthetic image tasks comparing the
/// ground-truth reference against sequential, local, and encoded NMF.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmfTable1Config {
    /// Directory holding `train-images-idx3-ubyte` and
    /// `train-labels-idx1-ubyte`.
    pub data_dir: PathBuf,
    pub base_components: usize,
    pub model_components: usize,
    /// Additive noise level; `null` uses 5% of the mean reconstruction.
    pub noise_std: Option<f64>,
    pub train_fraction: f64,
    pub mu: MuSetting,
    pub l1_weight: f64,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderSpec,
    pub tasks: Vec<NmfTask>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for NmfTable1Config {
    fn default() -> Self {
        NmfTable1Config {
            data_dir: PathBuf::from("data/fashion-mnist"),
            base_components: 40,
            model_components: 5,
            noise_std: None,
            train_fraction: 0.8,
            mu: MuSetting::Fixed(1.0),
            l1_weight: 0.01,
            optimizer: OptimizerConfig {
                iterations: 20_000,
                ..OptimizerConfig::default()
            },
            encoder: EncoderSpec::default(),
            tasks: NmfTask::all().to_vec(),
            seed: 0,
            output_dir: PathBuf::from("runs/nmf-table1"),
        }
    }
}

impl NmfTable1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("need at least one task".into()));
        }
        if !self.l1_weight.is_finite() || self.l1_weight < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "l1 weight must be non-negative, got {}",
                self.l1_weight
            )));
        }
        self.mu.validate()?;
        self.optimizer.validate()?;
        self.encoder.validate()?;
        self.synth_for(self.tasks[0]).validate()
    }

    fn synth_for(&self, task: NmfTask) -> NmfSynthConfig {
        NmfSynthConfig {
            base_components: self.base_components,
            model_components: self.model_components,
            noise_std: self.noise_std,
            task,
            seed: self.seed,
        }
    }
}

/// Config for `csfa-toy`: generate labeled two-class spectral windows,
/// train the encoded factor model, and record recovery plus test AUC.
/// The generator plants one spectral component per factor; the last
/// factor's score distribution depends on the label, the rest are
/// label-independent background.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsfaToyConfig {
    pub synth: CsmSynthConfig,
    pub centers_hz: Vec<f64>,
    pub bandwidth_hz: f64,
    pub mu: MuSetting,
    pub train_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub options: CsfaOptions,
    pub output_dir: PathBuf,
}

impl Default for CsfaToyConfig {
    fn default() -> Self {
        CsfaToyConfig {
            synth: CsmSynthConfig {
                rank: 1,
                windows: 120,
                ..CsmSynthConfig::default()
            },
            centers_hz: vec![8.0, 19.0],
            bandwidth_hz: 1.5,
            mu: MuSetting::Fixed(5.0),
            train_fraction: 2.0 / 3.0,
            optimizer: OptimizerConfig {
                step_size: 3e-3,
                iterations: 500,
                batch_size: 16,
                ..OptimizerConfig::default()
            },
            options: CsfaOptions {
                components_per_factor: 1,
                rank: 1,
                noise_precision: 50.0,
            },
            output_dir: PathBuf::from("runs/csfa-toy"),
        }
    }
}

impl CsfaToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.synth.components != 1 {
            return Err(Error::InvalidConfig(
                "the toy generator plants exactly one spectral component per factor; \
                 set synth.components to 1"
                    .into(),
            ));
        }
        if self.centers_hz.is_empty() {
            return Err(Error::InvalidConfig("need at least one generating center".into()));
        }
        for &c in &self.centers_hz {
            SpectralGaussian::new(c, self.bandwidth_hz)?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        self.mu.validate()?;
        self.optimizer.validate()?;
        self.options.validate()
    }
}

/// Config for `extract-features`: raw window files in, saturation filter,
/// banded Welch power and coherence features out.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractFeaturesConfig {
    pub windows_bin: PathBuf,
    pub windows_sidecar: PathBuf,
    /// `null` uses [`WelchConfig::default_for`] the window length.
    pub welch: Option<WelchConfig>,
    /// `null` uses the 1 Hz bands from 1 to 57 Hz.
    pub band_edges_hz: Option<Vec<f64>>,
    pub saturation_threshold: f64,
    pub output_dir: PathBuf,
}

impl Default for ExtractFeaturesConfig {
    fn default() -> Self {
        ExtractFeaturesConfig {
            windows_bin: PathBuf::from("windows.f64"),
            windows_sidecar: PathBuf::from("windows.meta"),
            welch: None,
            band_edges_hz: None,
            saturation_threshold: 0.1,
            output_dir: PathBuf::from("runs/extract-features"),
        }
    }
}

impl ExtractFeaturesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.saturation_threshold > 0.0 && self.saturation_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "saturation threshold must lie in (0,1], got {}",
                self.saturation_threshold
            )));
        }
        if let Some(edges) = &self.band_edges_hz {
            if edges.len() < 2 {
                return Err(Error::InvalidConfig("need at least one band".into()));
            }
        }
        Ok(())
    }
}

/// A parsed experiment config, tagged by the `experiment` key.
#[derive(Debug, Clone)]
pub enum ExperimentConfig {
    SweepMuLinear(SweepMuConfig),
    SensitivityMu(SensitivityMuConfig),
    NmfTable1(NmfTable1Config),
    CsfaToy(CsfaToyConfig),
    ExtractFeatures(ExtractFeaturesConfig),
}

/// Accepted values of the config file's `experiment` key.
pub const EXPERIMENT_TAGS: [&str; 5] = [
    "sweep_mu_linear",
    "sensitivity_mu",
    "nmf_table1",
    "csfa_toy",
    "extract_features",
];

/// Parse a config file. The `experiment` key selects the schema; every
/// other key must belong to that schema (unknown keys are rejected), and
/// omitted keys take their documented defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::InvalidConfig(format!("config is not valid JSON: {e}")))?;
    let serde_json::Value::Object(mut map) = root else {
        return Err(Error::InvalidConfig("config root must be a JSON object".into()));
    };
    let tag_value = map.remove("experiment").ok_or_else(|| {
        Error::InvalidConfig("config is missing the \"experiment\" key".into())
    })?;
    let Some(tag) = tag_value.as_str() else {
        return Err(Error::InvalidConfig(
            "the \"experiment\" key must be a string".into(),
        ));
    };
    let tag = tag.to_owned();
    let rest = serde_json::Value::Object(map);
    fn section<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T> {
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
    match tag.as_str() {
        "sweep_mu_linear" => Ok(ExperimentConfig::SweepMuLinear(section(rest)?)),
        "sensitivity_mu" => Ok(ExperimentConfig::SensitivityMu(section(rest)?)),
        "nmf_table1" => Ok(ExperimentConfig::NmfTable1(section(rest)?)),
        "csfa_toy" => Ok(ExperimentConfig::CsfaToy(section(rest)?)),
        "extract_features" => Ok(ExperimentConfig::ExtractFeatures(section(rest)?)),
        other => Err(Error::InvalidConfig(format!(
            "unknown experiment {other:?}; expected one of {}",
            EXPERIMENT_TAGS.join(", ")
        ))),
    }
}

/// Pretty JSON snapshot of the resolved config, `experiment` tag included.
pub fn snapshot_json(config: &ExperimentConfig) -> Result<String> {
    let value = match config {
        ExperimentConfig::SweepMuLinear(c) => serde_json::to_value(c),
        ExperimentConfig::SensitivityMu(c) => serde_json::to_value(c),
        ExperimentConfig::NmfTable1(c) => serde_json::to_value(c),
        ExperimentConfig::CsfaToy(c) => serde_json::to_value(c),
        ExperimentConfig::ExtractFeatures(c) => serde_json::to_value(c),
    };
    let mut value =
        value.map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))?;
    value
        .as_object_mut()
        .expect("every config serializes to a JSON object")
        .insert(
            "experiment".into(),
            serde_json::Value::String(config.tag().into()),
        );
    let mut text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))?;
    text.push('\n');
    Ok(text)
}

impl ExperimentConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentConfig::SweepMuLinear(_) => "sweep_mu_linear",
            ExperimentConfig::SensitivityMu(_) => "sensitivity_mu",
            ExperimentConfig::NmfTable1(_) => "nmf_table1",
            ExperimentConfig::CsfaToy(_) => "csfa_toy",
            ExperimentConfig::ExtractFeatures(_) => "extract_features",
        }
    }

    /// CLI subcommand that runs this experiment.
    pub fn subcommand(&self) -> &'static str {
        match self {
            ExperimentConfig::SweepMuLinear(_) => "sweep-mu",
            ExperimentConfig::SensitivityMu(_) => "sensitivity-mu",
            ExperimentConfig::NmfTable1(_) => "nmf-table1",
            ExperimentConfig::CsfaToy(_) => "csfa-toy",
            ExperimentConfig::ExtractFeatures(_) => "extract-features",
        }
    }

    /// All-defaults config for a tag; used when no `--config` is given.
    pub fn default_for_tag(tag: &str) -> Result<ExperimentConfig> {
        match tag {
            "sweep_mu_linear" => Ok(ExperimentConfig::SweepMuLinear(SweepMuConfig::default())),
            "sensitivity_mu" => Ok(ExperimentConfig::SensitivityMu(
                SensitivityMuConfig::default(),
            )),
            "nmf_table1" => Ok(ExperimentConfig::NmfTable1(NmfTable1Config::default())),
            "csfa_toy" => Ok(ExperimentConfig::CsfaToy(CsfaToyConfig::default())),
            "extract_features" => Ok(ExperimentConfig::ExtractFeatures(
                ExtractFeaturesConfig::default(),
            )),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment {other:?}; expected one of {}",
                EXPERIMENT_TAGS.join(", ")
            ))),
        }
    }

    pub fn output_dir(&self) -> &Path {
        match self {
            ExperimentConfig::SweepMuLinear(c) => &c.output_dir,
            ExperimentConfig::SensitivityMu(c) => &c.output_dir,
            ExperimentConfig::NmfTable1(c) => &c.output_dir,
            ExperimentConfig::CsfaToy(c) => &c.output_dir,
            ExperimentConfig::ExtractFeatures(c) => &c.output_dir,
        }
    }

    pub fn set_output_dir(&mut self, dir: &Path) {
        let target = match self {
            ExperimentConfig::SweepMuLinear(c) => &mut c.output_dir,
            ExperimentConfig::SensitivityMu(c) => &mut c.output_dir,
            ExperimentConfig::NmfTable1(c) => &mut c.output_dir,
            ExperimentConfig::CsfaToy(c) => &mut c.output_dir,
            ExperimentConfig::ExtractFeatures(c) => &mut c.output_dir,
        };
        *target = dir.to_path_buf();
    }

    /// Override the experiment's data seed (`--seed`). The optimizer seed
    /// stays as configured.
    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        match self {
            ExperimentConfig::SweepMuLinear(c) => c.synth.seed = seed,
            ExperimentConfig::SensitivityMu(c) => c.synth.seed = seed,
            ExperimentConfig::NmfTable1(c) => c.seed = seed,
            ExperimentConfig::CsfaToy(c) => c.synth.seed = seed,
            ExperimentConfig::ExtractFeatures(_) => {
                return Err(Error::InvalidConfig(
                    "extract-features is deterministic and takes no --seed".into(),
                ))
            }
        }
        Ok(())
    }

    /// Override the supervision strength (`--mu`).
    pub fn set_mu(&mut self, mu: MuSetting) -> Result<()> {
        match self {
            ExperimentConfig::NmfTable1(c) => c.mu = mu,
            ExperimentConfig::CsfaToy(c) => c.mu = mu,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "--mu applies only to nmf-table1 and csfa-toy; {} has no single μ",
                    other.subcommand()
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::SweepMuLinear(c) => c.validate(),
            ExperimentConfig::SensitivityMu(c) => c.validate(),
            ExperimentConfig::NmfTable1(c) => c.validate(),
            ExperimentConfig::CsfaToy(c) => c.validate(),
            ExperimentConfig::ExtractFeatures(c) => c.validate(),
        }
    }

    /// Run the experiment; returns the finalized run directory.
    pub fn run(&self) -> Result<PathBuf> {
        match self {
            ExperimentConfig::SweepMuLinear(c) => run_sweep_mu(c),
            ExperimentConfig::SensitivityMu(c) => run_sensitivity_mu(c),
            ExperimentConfig::NmfTable1(c) => run_nmf_table1(c),
            ExperimentConfig::CsfaToy(c) => run_csfa_toy(c),
            ExperimentConfig::ExtractFeatures(c) => run_extract_features(c),
        }
    }
}

/// A run directory being assembled. Files go through [`RunDir::write`] so
/// the closing manifest covers exactly what was written.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    /// Create (or reuse an unfinalized) run directory. A directory whose
    /// manifest already exists is a finalized run and is never reused.
    pub fn create(dir: &Path) -> Result<RunDir> {
        if dir.join(io::MANIFEST_NAME).is_file() {
            return Err(Error::InvalidConfig(format!(
                "{} already holds a finalized run; pick a fresh output directory (--out)",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    /// Write the manifest over everything recorded so far, sealing the run.
    pub fn finalize(self) -> Result<()> {
        io::write_manifest(&self.dir, &self.files)
    }

    /// Record a failure marker, then seal the run.
    pub fn fail(mut self, err: &Error) -> Result<()> {
        self.write("FAILED", format!("{err}\n").as_bytes())?;
        self.finalize()
    }
}

/// Shared run scaffold: snapshot first, body, manifest last. A body error
/// is recorded as a FAILED marker (still manifested) and then returned.
fn run_in_dir<F>(dir: &Path, snapshot: String, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut RunDir) -> Result<()>,
{
    let mut run = RunDir::create(dir)?;
    run.write("config.snapshot", snapshot.as_bytes())?;
    match body(&mut run) {
        Ok(()) => {
            run.finalize()?;
            Ok(dir.to_path_buf())
        }
        Err(err) => {
            // The original failure outranks any error from recording it.
            let _ = run.fail(&err);
            Err(err)
        }
    }
}

fn metric_row(mode: &str, metric: impl Into<String>, mu: Option<f64>, value: f64) -> MetricRow {
    MetricRow {
        mode: mode.to_string(),
        metric: metric.into(),
        mu: mu.map(|m| m.to_string()).unwrap_or_default(),
        value,
    }
}

/// Mean squared error per matrix entry.
fn mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / (a.nrows() * a.ncols()) as f64
}

/// Summed binary cross-entropy of predicted probabilities.
fn cross_entropy(probs: &[f64], labels: &[bool]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Held-out metric rows for both modes at every grid point. For each
/// model the four curves use scores with the outcome (Local solves the
/// joint system; the encoder ignores Y, so Encoded reuses its encoding)
/// and scores from the predictors alone.
fn linear_sweep_rows(
    synth_cfg: &LinearSynthConfig,
    fitted_factors: usize,
    grid: &[f64],
    with_dragging: bool,
) -> Result<Vec<MetricRow>> {
    let data = synth::gen_linear(synth_cfg)?;
    let x = Centered::center(&data.x_train)?;
    let y = Centered::center(&data.y_train)?;
    let mut rows = Vec::new();
    for &mu in grid {
        for (mode, mode_name) in [(Mode::Local, "local"), (Mode::Encoded, "encoded")] {
            let model = linear::fit(&x, &y, fitted_factors, mu, mode)?;
            let x_test = model.center_x(&data.x_test)?;
            let y_test = model.center_y(&data.y_test)?;
            let s_unknown = model.encode_scores(&x_test)?;
            let s_known = match mode {
                Mode::Local => model.scores_with_outcome(&x_test, &y_test)?,
                Mode::Encoded => s_unknown.clone(),
            };
            for (scores, suffix) in [(&s_known, "y_known"), (&s_unknown, "y_unknown")] {
                let recon = model.reconstruct(scores)?;
                let pred = model.predict(scores)?;
                rows.push(metric_row(
                    mode_name,
                    format!("recon_mse_{suffix}"),
                    Some(mu),
                    mse(&recon, &data.x_test),
                ));
                rows.push(metric_row(
                    mode_name,
                    format!("pred_mse_{suffix}"),
                    Some(mu),
                    mse(&pred, &data.y_test),
                ));
            }
            if with_dragging {
                let dragging = linear::factor_dragging(&model, &x_test, &y_test)?;
                rows.push(metric_row(mode_name, "factor_dragging", Some(mu), dragging));
            }
        }
    }
    Ok(rows)
}

/// Fit Local and Encoded linear models over the μ grid and record the
/// four held-out curves per mode.
pub fn run_sweep_mu(config: &SweepMuConfig) -> Result<PathBuf> {
    config.validate()?;
    let snapshot = snapshot_json(&ExperimentConfig::SweepMuLinear(config.clone()))?;
    run_in_dir(&config.output_dir, snapshot, |run| {
        let rows = linear_sweep_rows(
            &config.synth,
            config.fitted_factors,
            &config.mu_grid.values(),
            false,
        )?;
        run.write("metrics.csv", io::metrics_csv(&rows).as_bytes())
    })
}

/// Same sweep with matched dimension, plus the factor-dragging distance
/// per mode and μ.
pub fn run_sensitivity_mu(config: &SensitivityMuConfig) -> Result<PathBuf> {
    config.validate()?;
    let snapshot = snapshot_json(&ExperimentConfig::SensitivityMu(config.clone()))?;
    run_in_dir(&config.output_dir, snapshot, |run| {
        let rows = linear_sweep_rows(
            &config.synth,
            config.fitted_factors,
            &config.mu_grid.values(),
            true,
        )?;
        run.write("metrics.csv", io::metrics_csv(&rows).as_bytes())
    })
}

/// Bisect ln μ until the weighted supervision loss and the reconstruction
/// loss of a short encoded probe fit agree within 10%. Falls back to the
/// bracket midpoint if the ratio never settles.
fn auto_mu_nmf(
    x: &DMatrix<f64>,
    labels: &[bool],
    k: usize,
    encoder: EncoderSpec,
    optimizer: &OptimizerConfig,
    l1_weight: f64,
) -> Result<f64> {
    let probe_cfg = OptimizerConfig {
        iterations: optimizer.iterations.min(NMF_PROBE_ITERATIONS).max(1),
        ..optimizer.clone()
    };
    let ratio = |mu: f64| -> Result<f64> {
        let model = nmf::fit(
            x,
            labels,
            k,
            NmfMode::Encoded,
            mu,
            Some(encoder),
            &probe_cfg,
            l1_weight,
        )?;
        let scores = model.encode(x)?;
        let recon = (x - model.loadings() * &scores).norm_squared();
        let ce = cross_entropy(&model.predict_proba(x)?, labels);
        let r = mu * ce / recon.max(f64::MIN_POSITIVE);
        if !r.is_finite() || r <= 0.0 {
            return Err(Error::NumericalError(format!(
                "loss ratio {r} at μ={mu} during auto-μ probing"
            )));
        }
        Ok(r)
    };
    bisect_mu(ratio)
}

/// Same balancing heuristic for the spectral factor model: supervision
/// magnitude μ·Σce against the magnitude of the summed GP likelihood.
fn auto_mu_csfa(
    windows: &DMatrix<f64>,
    times: &[f64],
    features: &DMatrix<f64>,
    labels: &[bool],
    l: usize,
    optimizer: &OptimizerConfig,
    options: &CsfaOptions,
) -> Result<f64> {
    let probe_cfg = OptimizerConfig {
        iterations: optimizer.iterations.min(CSFA_PROBE_ITERATIONS).max(1),
        ..optimizer.clone()
    };
    let ratio = |mu: f64| -> Result<f64> {
        let (model, head) =
            csm::fit_encoded_csfa(windows, times, features, labels, l, mu, &probe_cfg, options)?;
        let nll = csm::mean_gp_nll(&model, windows)? * windows.ncols() as f64;
        let scores = model
            .encoder
            .as_ref()
            .expect("encoded training always stores an encoder")
            .forward(features);
        let ce = cross_entropy(&head.predict_proba(&scores)?, labels);
        let r = mu * ce / nll.abs().max(f64::MIN_POSITIVE);
        if !r.is_finite() || r <= 0.0 {
            return Err(Error::NumericalError(format!(
                "loss ratio {r} at μ={mu} during auto-μ probing"
            )));
        }
        Ok(r)
    };
    bisect_mu(ratio)
}

fn bisect_mu<F: FnMut(f64) -> Result<f64>>(mut ratio: F) -> Result<f64> {
    let tolerance = MU_AUTO_TOLERANCE.ln();
    let (mut lo, mut hi) = (MU_AUTO_MIN.ln(), MU_AUTO_MAX.ln());
    // The ratio grows with μ; if even the bracket edge cannot cross 1,
    // the edge is the closest achievable balance.
    if ratio(lo.exp())? >= 1.0 {
        return Ok(lo.exp());
    }
    if ratio(hi.exp())? <= 1.0 {
        return Ok(hi.exp());
    }
    for _ in 0..MU_AUTO_MAX_PROBES {
        let mid = 0.5 * (lo + hi);
        let r = ratio(mid.exp())?;
        if r.ln().abs() <= tolerance {
            return Ok(mid.exp());
        }
        if r < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Build the pseudo-synthetic tasks, fit the ground-truth reference plus
/// the three NMF variants, and write the table of test AUCs.
pub fn run_nmf_table1(config: &NmfTable1Config) -> Result<PathBuf> {
    config.validate()?;
    let images_path = config.data_dir.join("train-images-idx3-ubyte");
    let labels_path = config.data_dir.join("train-labels-idx1-ubyte");
    if !images_path.is_file() || !labels_path.is_file() {
        return Err(Error::MissingInput(format!(
            "Fashion-MNIST IDX files not found; expected {} and {}. Download \
             train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz from the Fashion-MNIST \
             distribution (github.com/zalandoresearch/fashion-mnist), gunzip both, and place \
             the uncompressed files in {}",
            images_path.display(),
            labels_path.display(),
            config.data_dir.display()
        )));
    }
    let snapshot = snapshot_json(&ExperimentConfig::NmfTable1(config.clone()))?;
    run_in_dir(&config.output_dir, snapshot, |run| {
        let images = idx::read_idx_images(&images_path)?;
        let labels = idx::read_idx_labels(&labels_path)?;
        if labels.len() != images.ncols() {
            return Err(Error::ShapeError(format!(
                "{} labels for {} images",
                labels.len(),
                images.ncols()
            )));
        }
        let methods = ["ground_truth", "sequential", "local", "encoded"];
        let mut table: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
        let mut rows = Vec::new();
        let mut runtime_rows = Vec::new();
        for &task in &config.tasks {
            let pseudo = synth::gen_nmf_pseudo(&images, &labels, &config.synth_for(task))?;
            let (train_idx, test_idx) =
                stratified_split(&pseudo.labels, config.train_fraction, config.seed)?;
            let x_train = pseudo.x_synth.select_columns(&train_idx);
            let x_test = pseudo.x_synth.select_columns(&test_idx);
            let s_train = pseudo.base_scores.select_columns(&train_idx);
            let s_test = pseudo.base_scores.select_columns(&test_idx);
            let labels_train: Vec<bool> = train_idx.iter().map(|&i| pseudo.labels[i]).collect();
            let labels_test: Vec<bool> = test_idx.iter().map(|&i| pseudo.labels[i]).collect();

            let mu = match config.mu {
                MuSetting::Fixed(v) => v,
                MuSetting::Auto => auto_mu_nmf(
                    &x_train,
                    &labels_train,
                    config.model_components,
                    config.encoder,
                    &config.optimizer,
                    config.l1_weight,
                )?,
            };

            let start = Instant::now();
            let reference = metrics::logistic_fit(&s_train, &labels_train, GROUND_TRUTH_RIDGE)?;
            let gt_seconds = start.elapsed().as_secs_f64();
            let gt_auc = metrics::auc(&reference.predict_proba(&s_test)?, &labels_test)?;
            table[0].push(gt_auc);
            rows.push(metric_row(
                "ground_truth",
                format!("auc_{}", task.name()),
                None,
                gt_auc,
            ));
            runtime_rows.push(metric_row(
                "ground_truth",
                format!("runtime_seconds_{}", task.name()),
                None,
                gt_seconds,
            ));

            let modes = [
                (NmfMode::Sequential, "sequential", None),
                (NmfMode::Local, "local", None),
                (NmfMode::Encoded, "encoded", Some(config.encoder)),
            ];
            for (slot, (mode, name, spec)) in modes.into_iter().enumerate() {
                let start = Instant::now();
                let model = nmf::fit(
                    &x_train,
                    &labels_train,
                    config.model_components,
                    mode,
                    mu,
                    spec,
                    &config.optimizer,
                    config.l1_weight,
                )?;
                let seconds = start.elapsed().as_secs_f64();
                let auc = metrics::auc(&model.predict_proba(&x_test)?, &labels_test)?;
                table[slot + 1].push(auc);
                // Sequential ignores μ by construction; leave its μ blank.
                let mu_used = (mode != NmfMode::Sequential).then_some(mu);
                rows.push(metric_row(name, format!("auc_{}", task.name()), mu_used, auc));
                runtime_rows.push(metric_row(
                    name,
                    format!("runtime_seconds_{}", task.name()),
                    mu_used,
                    seconds,
                ));
                run.write(&format!("{}_{name}.snmf", task.name()), &model.to_bytes())?;
            }
        }
        let mut table_csv = String::from("method");
        for &task in &config.tasks {
            let _ = write!(table_csv, ",{}", task.name());
        }
        table_csv.push('\n');
        for (method, aucs) in methods.iter().zip(&table) {
            let _ = write!(table_csv, "{method}");
            for auc in aucs {
                let _ = write!(table_csv, ",{auc}");
            }
            table_csv.push('\n');
        }
        run.write("table1.csv", table_csv.as_bytes())?;
        run.write("metrics.csv", io::metrics_csv(&rows).as_bytes())?;
        run.write("runtimes.csv", io::metrics_csv(&runtime_rows).as_bytes())
    })
}

fn random_coregionalization(
    channels: usize,
    rank: usize,
    scale: f64,
    seed: u64,
) -> CoregionalizationFactor {
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

/// Labeled toy dataset: one generating factor per configured center, the
/// last factor's scores high for positive windows and near zero for
/// negative ones, the others label-independent background.
fn toy_csfa_dataset(
    config: &CsfaToyConfig,
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>, Vec<bool>)> {
    let seed = config.synth.seed;
    let l = config.centers_hz.len();
    let factors: Vec<CsmParams> = config
        .centers_hz
        .iter()
        .enumerate()
        .map(|(i, &center)| -> Result<CsmParams> {
            Ok(CsmParams {
                components: vec![CsmComponent {
                    gaussian: SpectralGaussian::new(center, config.bandwidth_hz)?,
                    coregionalization: random_coregionalization(
                        config.synth.channels,
                        config.synth.rank,
                        TOY_COREG_SCALE,
                        seed + 1 + i as u64,
                    ),
                }],
            })
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1 + l as u64);
    let labels: Vec<bool> = (0..config.synth.windows)
        .map(|_| rng.random::<bool>())
        .collect();
    let scores = DMatrix::from_fn(l, config.synth.windows, |fi, w| {
        if fi + 1 < l {
            0.6 + 0.8 * rng.random::<f64>()
        } else if labels[w] {
            1.6 + 0.4 * rng.random::<f64>()
        } else {
            0.15 + 0.1 * rng.random::<f64>()
        }
    });
    let (windows, times) = synth::gen_csm(&config.synth, &factors, &scores)?;
    let features = csm::power_feature_matrix(&windows, config.synth.channels, TOY_PAD_FACTOR)?;
    Ok((windows, times, features, labels))
}

/// Generate the labeled toy windows, train the encoded spectral factor
/// model, and record the recovered spectral parameters plus test AUC.
pub fn run_csfa_toy(config: &CsfaToyConfig) -> Result<PathBuf> {
    config.validate()?;
    let snapshot = snapshot_json(&ExperimentConfig::CsfaToy(config.clone()))?;
    run_in_dir(&config.output_dir, snapshot, |run| {
        let (windows, times, features, labels) = toy_csfa_dataset(config)?;
        let (train_idx, test_idx) =
            stratified_split(&labels, config.train_fraction, config.synth.seed)?;
        let train_windows = windows.select_columns(&train_idx);
        let train_features = features.select_columns(&train_idx);
        let labels_train: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
        let test_features = features.select_columns(&test_idx);
        let labels_test: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();

        let l = config.centers_hz.len();
        let mu = match config.mu {
            MuSetting::Fixed(v) => v,
            MuSetting::Auto => auto_mu_csfa(
                &train_windows,
                &times,
                &train_features,
                &labels_train,
                l,
                &config.optimizer,
                &config.options,
            )?,
        };

        let start = Instant::now();
        let (model, head) = csm::fit_encoded_csfa(
            &train_windows,
            &times,
            &train_features,
            &labels_train,
            l,
            mu,
            &config.optimizer,
            &config.options,
        )?;
        let seconds = start.elapsed().as_secs_f64();

        let test_scores = model
            .encoder
            .as_ref()
            .expect("encoded training always stores an encoder")
            .forward(&test_features);
        let test_auc = metrics::auc(&head.predict_proba(&test_scores)?, &labels_test)?;

        let mut rows = vec![metric_row("encoded", "test_auc", Some(mu), test_auc)];
        // Report factors sorted by center so the rows line up with the
        // sorted generating centers regardless of fit order.
        let mut order: Vec<usize> = (0..model.factors.len()).collect();
        let first_center =
            |fi: usize| -> f64 { model.factors[fi].components[0].gaussian.center_hz };
        order.sort_by(|&a, &b| first_center(a).partial_cmp(&first_center(b)).expect("finite"));
        for (slot, &fi) in order.iter().enumerate() {
            for (ci, component) in model.factors[fi].components.iter().enumerate() {
                let suffix = if model.factors[fi].components.len() == 1 {
                    format!("f{slot}")
                } else {
                    format!("f{slot}_c{ci}")
                };
                rows.push(metric_row(
                    "encoded",
                    format!("center_hz_{suffix}"),
                    Some(mu),
                    component.gaussian.center_hz,
                ));
                rows.push(metric_row(
                    "encoded",
                    format!("bandwidth_hz_{suffix}"),
                    Some(mu),
                    component.gaussian.bandwidth_hz,
                ));
            }
        }
        let mut true_centers = config.centers_hz.clone();
        true_centers.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        for (slot, center) in true_centers.iter().enumerate() {
            rows.push(metric_row(
                "generator",
                format!("center_hz_true_f{slot}"),
                None,
                *center,
            ));
        }
        run.write("metrics.csv", io::metrics_csv(&rows).as_bytes())?;
        let runtime_rows = vec![metric_row("encoded", "runtime_seconds", Some(mu), seconds)];
        run.write("runtimes.csv", io::metrics_csv(&runtime_rows).as_bytes())
    })
}

/// Read raw windows, drop saturated ones, and emit banded Welch power and
/// coherence features with one named column per feature.
pub fn run_extract_features(config: &ExtractFeaturesConfig) -> Result<PathBuf> {
    config.validate()?;
    for path in [&config.windows_bin, &config.windows_sidecar] {
        if !path.is_file() {
            return Err(Error::MissingInput(format!(
                "window file {} not found; extract-features needs the raw binary and its \
                 text sidecar",
                path.display()
            )));
        }
    }
    let snapshot = snapshot_json(&ExperimentConfig::ExtractFeatures(config.clone()))?;
    run_in_dir(&config.output_dir, snapshot, |run| {
        let windows = io::read_windows(&config.windows_bin, &config.windows_sidecar)?;
        let total = windows.len();
        let (kept, rejections) =
            spectral::saturation_filter(windows, config.saturation_threshold)?;
        let first = kept.first().ok_or_else(|| {
            Error::InvalidData("the saturation filter rejected every window".into())
        })?;
        let welch = config
            .welch
            .clone()
            .unwrap_or_else(|| WelchConfig::default_for(first.nsamples()));
        let edges = config
            .band_edges_hz
            .clone()
            .unwrap_or_else(spectral::default_band_edges);

        let names = SpectralFeatureVector::feature_names(first.channels(), &edges);
        let mut features_csv = String::from("window_id");
        for name in &names {
            let _ = write!(features_csv, ",{name}");
        }
        features_csv.push('\n');
        for window in &kept {
            let psd = spectral::welch_psd(window, &welch)?;
            let coh = spectral::ms_coherence(window, &welch)?;
            let banded_power = spectral::band_aggregate(&psd.frequencies_hz, &psd.power, &edges)?;
            let banded_coh =
                spectral::band_aggregate(&coh.frequencies_hz, &coh.coherence, &edges)?;
            let vector = spectral::assemble_features(banded_power, banded_coh, edges.clone())?;
            let _ = write!(features_csv, "{}", window.window_id);
            for value in vector.flatten() {
                let _ = write!(features_csv, ",{value}");
            }
            features_csv.push('\n');
        }
        run.write("features.csv", features_csv.as_bytes())?;

        let mut rejections_csv = String::from("window_id,channel\n");
        for rejection in &rejections {
            let _ = writeln!(rejections_csv, "{},{}", rejection.window_id, rejection.channel);
        }
        run.write("rejections.csv", rejections_csv.as_bytes())?;

        let rejected = total - kept.len();
        let rows = vec![
            metric_row("all", "windows_total", None, total as f64),
            metric_row("all", "windows_kept", None, kept.len() as f64),
            metric_row("all", "windows_rejected", None, rejected as f64),
        ];
        run.write("metrics.csv", io::metrics_csv(&rows).as_bytes())
    })
}

/// Verification result for `verify <run-dir>`.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub report: io::VerifyReport,
    /// The run recorded a failure when it was produced.
    pub failed_marker: bool,
}

impl VerifyOutcome {
    /// True when every hash matches, nothing is missing or unlisted, and
    /// the run completed without a failure marker.
    pub fn is_ok(&self) -> bool {
        self.report.is_clean() && !self.failed_marker
    }
}

/// Re-hash a finalized run directory against its manifest.
pub fn verify_run(dir: &Path) -> Result<VerifyOutcome> {
    let report = io::verify_manifest(dir)?;
    let failed_marker = dir.join("FAILED").is_file();
    Ok(VerifyOutcome {
        report,
        failed_marker,
    })
}
