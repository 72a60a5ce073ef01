//! Spectral feature extraction for multichannel time-series windows:
//! Welch power spectral density, magnitude-squared coherence, 1 Hz band
//! aggregation, saturation filtering, and assembly into flat non-negative
//! feature vectors with a documented ordering.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// One multichannel window: rows are channels, columns are samples.
#[derive(Debug, Clone)]
pub struct TimeSeriesWindow {
    pub samples: DMatrix<f64>,
    pub sample_rate_hz: f64,
    pub window_id: u64,
}

impl TimeSeriesWindow {
    pub fn new(samples: DMatrix<f64>, sample_rate_hz: f64, window_id: u64) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() < 2 {
            return Err(Error::InvalidData(
                "window needs at least one channel and two samples".into(),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "window {window_id} contains non-finite samples"
            )));
        }
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::InvalidData(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(TimeSeriesWindow {
            samples,
            sample_rate_hz,
            window_id,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn nsamples(&self) -> usize {
        self.samples.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    Hamming,
    Hann,
    Rect,
}

/// Welch estimator settings. Defaults: segments of ⌊N/8⌉ samples, 50%
/// overlap, Hamming taper, FFT length the next power of two at or above
/// the segment length.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub taper: Taper,
    pub fft_length: usize,
}

impl WelchConfig {
    pub fn default_for(nsamples: usize) -> WelchConfig {
        let segment = ((nsamples as f64 / 8.0).round() as usize).max(2);
        WelchConfig {
            segment_length: segment,
            overlap_fraction: 0.5,
            taper: Taper::Hamming,
            fft_length: segment.next_power_of_two(),
        }
    }

    /// Windows must span at least two segment lengths so segment averaging
    /// is meaningful.
    pub fn validate_for(&self, nsamples: usize) -> Result<()> {
        if self.segment_length < 2 {
            return Err(Error::InvalidConfig(
                "segment length must be at least 2".into(),
            ));
        }
        if nsamples < 2 * self.segment_length {
            return Err(Error::InvalidConfig(format!(
                "window of {nsamples} samples is shorter than two segments of {}",
                self.segment_length
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidConfig(format!(
                "overlap fraction must lie in [0,1), got {}",
                self.overlap_fraction
            )));
        }
        if self.fft_length < self.segment_length {
            return Err(Error::InvalidConfig(format!(
                "fft length {} is shorter than segment length {}",
                self.fft_length, self.segment_length
            )));
        }
        Ok(())
    }

    fn taper_values(&self) -> Vec<f64> {
        let m = self.segment_length;
        (0..m)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / (m - 1) as f64;
                match self.taper {
                    Taper::Hamming => 0.54 - 0.46 * phase.cos(),
                    Taper::Hann => 0.5 * (1.0 - phase.cos()),
                    Taper::Rect => 1.0,
                }
            })
            .collect()
    }

    fn segment_starts(&self, nsamples: usize) -> Vec<usize> {
        let step = (self.segment_length
            - (self.overlap_fraction * self.segment_length as f64).floor() as usize)
            .max(1);
        (0..)
            .map(|k| k * step)
            .take_while(|start| start + self.segment_length <= nsamples)
            .collect()
    }
}

/// One-sided power spectral density per channel (rows), in units of
/// signal-power per Hz.
#[derive(Debug, Clone)]
pub struct PowerSpectrum {
    pub frequencies_hz: Vec<f64>,
    pub power: DMatrix<f64>,
}

/// Magnitude-squared coherence per channel pair (rows), pairs in
/// lexicographic order (0,1), (0,2), ..., (C−2,C−1).
#[derive(Debug, Clone)]
pub struct CoherenceSpectrum {
    pub frequencies_hz: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub coherence: DMatrix<f64>,
}

/// Tapered segment FFTs for every channel, plus the one-sided density
/// scale. Auto- and cross-spectra must accumulate through the same code
/// path so a duplicated channel yields coherence exactly 1.
struct SegmentTransforms {
    frequencies_hz: Vec<f64>,
    bins: usize,
    nyquist_bin: Option<usize>,
    ffts: Vec<Vec<Vec<Complex64>>>,
    scale: f64,
}

fn segment_transforms(window: &TimeSeriesWindow, cfg: &WelchConfig) -> Result<SegmentTransforms> {
    cfg.validate_for(window.nsamples())?;
    let taper = cfg.taper_values();
    let starts = cfg.segment_starts(window.nsamples());
    let fs = window.sample_rate_hz;
    let fft_len = cfg.fft_length;
    let bins = fft_len / 2 + 1;
    let nyquist_bin = if fft_len % 2 == 0 { Some(bins - 1) } else { None };
    let frequencies_hz = (0..bins).map(|k| k as f64 * fs / fft_len as f64).collect();
    let taper_power: f64 = taper.iter().map(|w| w * w).sum();
    let scale = 1.0 / (fs * taper_power);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_len);
    let mut ffts = Vec::with_capacity(window.channels());
    for c in 0..window.channels() {
        let mut per_segment = Vec::with_capacity(starts.len());
        for &start in &starts {
            let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
            for i in 0..cfg.segment_length {
                buf[i] = Complex64::new(window.samples[(c, start + i)] * taper[i], 0.0);
            }
            fft.process(&mut buf);
            buf.truncate(bins);
            per_segment.push(buf);
        }
        ffts.push(per_segment);
    }
    Ok(SegmentTransforms {
        frequencies_hz,
        bins,
        nyquist_bin,
        ffts,
        scale,
    })
}

impl SegmentTransforms {
    fn nsegments(&self) -> usize {
        self.ffts.first().map_or(0, |f| f.len())
    }

    /// Averaged one-sided cross-spectral density between channels a and b.
    /// With a == b this is the auto-spectrum (imaginary part exactly 0).
    fn cross_density(&self, a: usize, b: usize) -> Vec<Complex64> {
        let nseg = self.nsegments() as f64;
        let mut acc = vec![Complex64::new(0.0, 0.0); self.bins];
        for seg in 0..self.nsegments() {
            let fa = &self.ffts[a][seg];
            let fb = &self.ffts[b][seg];
            for k in 0..self.bins {
                acc[k] += fa[k] * fb[k].conj();
            }
        }
        for (k, value) in acc.iter_mut().enumerate() {
            let one_sided = if k == 0 || Some(k) == self.nyquist_bin {
                1.0
            } else {
                2.0
            };
            *value *= self.scale * one_sided / nseg;
        }
        acc
    }
}

/// Welch power spectral density for every channel of a window.
pub fn welch_psd(window: &TimeSeriesWindow, cfg: &WelchConfig) -> Result<PowerSpectrum> {
    let transforms = segment_transforms(window, cfg)?;
    let mut power = DMatrix::zeros(window.channels(), transforms.bins);
    for c in 0..window.channels() {
        let auto = transforms.cross_density(c, c);
        for (k, value) in auto.iter().enumerate() {
            power[(c, k)] = value.re;
        }
    }
    Ok(PowerSpectrum {
        frequencies_hz: transforms.frequencies_hz,
        power,
    })
}

/// Magnitude-squared coherence |S_ab|²/(S_aa·S_bb) for every channel pair,
/// from the same Welch segment averaging as [`welch_psd`]. Requires at
/// least two averaged segments; single-segment coherence is identically 1
/// and therefore rejected.
pub fn ms_coherence(window: &TimeSeriesWindow, cfg: &WelchConfig) -> Result<CoherenceSpectrum> {
    let transforms = segment_transforms(window, cfg)?;
    if transforms.nsegments() < 2 {
        return Err(Error::InvalidConfig(format!(
            "coherence needs at least 2 Welch segments, got {}",
            transforms.nsegments()
        )));
    }
    let c = window.channels();
    let pairs: Vec<(usize, usize)> = (0..c)
        .flat_map(|i| ((i + 1)..c).map(move |j| (i, j)))
        .collect();
    let autos: Vec<Vec<Complex64>> = (0..c).map(|ch| transforms.cross_density(ch, ch)).collect();
    let mut coherence = DMatrix::zeros(pairs.len(), transforms.bins);
    for (row, &(a, b)) in pairs.iter().enumerate() {
        let cross = transforms.cross_density(a, b);
        for k in 0..transforms.bins {
            let denom = autos[a][k].re * autos[b][k].re;
            let value = if denom > 0.0 {
                cross[k].norm_sqr() / denom
            } else {
                0.0
            };
            debug_assert!(value <= 1.0 + 1e-12, "coherence {value} beyond rounding slack");
            coherence[(row, k)] = value.clamp(0.0, 1.0);
        }
    }
    Ok(CoherenceSpectrum {
        frequencies_hz: transforms.frequencies_hz,
        pairs,
        coherence,
    })
}

/// Band edges for 1 Hz bands covering [1, 57) Hz, i.e. 56 bands.
pub fn default_band_edges() -> Vec<f64> {
    (1..=57).map(|k| k as f64).collect()
}

/// Average spectrum rows into frequency bands. Band k spans
/// [edges[k], edges[k+1]) and takes the mean of the bins whose center
/// frequency falls inside; a band containing no bin becomes 0.
pub fn band_aggregate(
    frequencies_hz: &[f64],
    spectrum: &DMatrix<f64>,
    band_edges_hz: &[f64],
) -> Result<DMatrix<f64>> {
    if spectrum.ncols() != frequencies_hz.len() {
        return Err(Error::ShapeError(format!(
            "{} spectrum columns vs {} frequencies",
            spectrum.ncols(),
            frequencies_hz.len()
        )));
    }
    if band_edges_hz.len() < 2 {
        return Err(Error::InvalidConfig("need at least one band".into()));
    }
    if band_edges_hz.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "band edges must be strictly increasing".into(),
        ));
    }
    let resolution = if frequencies_hz.len() >= 2 {
        frequencies_hz[1] - frequencies_hz[0]
    } else {
        f64::INFINITY
    };
    let narrowest = band_edges_hz
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if resolution > narrowest {
        return Err(Error::InvalidConfig(format!(
            "spectral resolution {resolution} Hz is coarser than the narrowest band {narrowest} Hz"
        )));
    }
    let bands = band_edges_hz.len() - 1;
    let mut out = DMatrix::zeros(spectrum.nrows(), bands);
    for band in 0..bands {
        let lo = band_edges_hz[band];
        let hi = band_edges_hz[band + 1];
        let members: Vec<usize> = frequencies_hz
            .iter()
            .enumerate()
            .filter(|(_, f)| **f >= lo && **f < hi)
            .map(|(k, _)| k)
            .collect();
        if members.is_empty() {
            continue;
        }
        for row in 0..spectrum.nrows() {
            let sum: f64 = members.iter().map(|&k| spectrum[(row, k)]).sum();
            out[(row, band)] = sum / members.len() as f64;
        }
    }
    Ok(out)
}

/// A window rejected by the saturation filter, with the offending channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaturationRejection {
    pub window_id: u64,
    pub channel: usize,
}

/// Drop windows in which any channel sits at its extreme magnitude
/// (within 1e-9 of the per-channel max |x|) for more than
/// `threshold_fraction` of consecutive samples. A constant channel is flat
/// at its own extreme and therefore counts as saturated.
pub fn saturation_filter(
    windows: Vec<TimeSeriesWindow>,
    threshold_fraction: f64,
) -> Result<(Vec<TimeSeriesWindow>, Vec<SaturationRejection>)> {
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "saturation threshold must lie in (0,1], got {threshold_fraction}"
        )));
    }
    let mut kept = Vec::with_capacity(windows.len());
    let mut rejected = Vec::new();
    for window in windows {
        let mut bad_channel = None;
        for c in 0..window.channels() {
            let row = window.samples.row(c);
            let max_mag = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let limit = threshold_fraction * window.nsamples() as f64;
            let mut run = 0usize;
            let mut longest = 0usize;
            for value in row.iter() {
                if max_mag - value.abs() <= 1e-9 {
                    run += 1;
                    longest = longest.max(run);
                } else {
                    run = 0;
                }
            }
            if longest as f64 > limit {
                bad_channel = Some(c);
                break;
            }
        }
        match bad_channel {
            Some(channel) => rejected.push(SaturationRejection {
                window_id: window.window_id,
                channel,
            }),
            None => kept.push(window),
        }
    }
    Ok((kept, rejected))
}

/// Banded power and coherence features for one window. Flattening order is
/// part of the external contract: all powers channel-major then band,
/// followed by coherences pair-lexicographic then band.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatureVector {
    pub power: DMatrix<f64>,
    pub coherence: DMatrix<f64>,
    pub band_edges_hz: Vec<f64>,
}

impl SpectralFeatureVector {
    pub fn channels(&self) -> usize {
        self.power.nrows()
    }

    pub fn bands(&self) -> usize {
        self.power.ncols()
    }

    pub fn len(&self) -> usize {
        self.power.len() + self.coherence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.len());
        for c in 0..self.power.nrows() {
            for f in 0..self.power.ncols() {
                flat.push(self.power[(c, f)]);
            }
        }
        for pair in 0..self.coherence.nrows() {
            for f in 0..self.coherence.ncols() {
                flat.push(self.coherence[(pair, f)]);
            }
        }
        flat
    }

    pub fn from_flat(
        channels: usize,
        band_edges_hz: Vec<f64>,
        flat: &[f64],
    ) -> Result<SpectralFeatureVector> {
        if band_edges_hz.len() < 2 {
            return Err(Error::InvalidConfig("need at least one band".into()));
        }
        let bands = band_edges_hz.len() - 1;
        let npairs = channels * channels.saturating_sub(1) / 2;
        let expected = channels * bands + npairs * bands;
        if flat.len() != expected {
            return Err(Error::ShapeError(format!(
                "{} flat values but {channels} channels x {bands} bands needs {expected}",
                flat.len()
            )));
        }
        let power = DMatrix::from_fn(channels, bands, |c, f| flat[c * bands + f]);
        let offset = channels * bands;
        let coherence =
            DMatrix::from_fn(npairs, bands, |p, f| flat[offset + p * bands + f]);
        Ok(SpectralFeatureVector {
            power,
            coherence,
            band_edges_hz,
        })
    }

    /// Column names matching [`SpectralFeatureVector::flatten`], e.g.
    /// `pow_ch3_12Hz` and `coh_ch2_ch7_31Hz`. Channels are 0-based; the
    /// band label is the band's lower edge in Hz.
    pub fn feature_names(channels: usize, band_edges_hz: &[f64]) -> Vec<String> {
        let bands = band_edges_hz.len().saturating_sub(1);
        let mut names = Vec::new();
        for c in 0..channels {
            for f in 0..bands {
                names.push(format!("pow_ch{c}_{}Hz", band_edges_hz[f]));
            }
        }
        for i in 0..channels {
            for j in (i + 1)..channels {
                for f in 0..bands {
                    names.push(format!("coh_ch{i}_ch{j}_{}Hz", band_edges_hz[f]));
                }
            }
        }
        names
    }
}

/// Combine banded power and coherence matrices into a feature vector,
/// checking dimensional consistency.
pub fn assemble_features(
    power: DMatrix<f64>,
    coherence: DMatrix<f64>,
    band_edges_hz: Vec<f64>,
) -> Result<SpectralFeatureVector> {
    let channels = power.nrows();
    let bands = band_edges_hz.len().saturating_sub(1);
    if power.ncols() != bands || coherence.ncols() != bands {
        return Err(Error::ShapeError(format!(
            "power has {} bands, coherence {}, edges define {bands}",
            power.ncols(),
            coherence.ncols()
        )));
    }
    let npairs = channels * channels.saturating_sub(1) / 2;
    if coherence.nrows() != npairs {
        return Err(Error::ShapeError(format!(
            "{} coherence rows but {channels} channels need {npairs} pairs",
            coherence.nrows()
        )));
    }
    Ok(SpectralFeatureVector {
        power,
        coherence,
        band_edges_hz,
    })
}
