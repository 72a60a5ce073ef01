//! File formats shared by the CLI experiments: raw window binaries with a
//! text sidecar, delimited metric and feature tables, and run-directory
//! manifests with content hashes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spectral::TimeSeriesWindow;

/// Write windows as channel-major 64-bit little-endian floats, windows
/// concatenated in order, plus a `key=value` sidecar describing the
/// layout. All windows must share channel count, length, and sample rate.
pub fn write_windows(
    bin_path: &Path,
    sidecar_path: &Path,
    windows: &[TimeSeriesWindow],
) -> Result<()> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidData("cannot write zero windows".into()))?;
    let (c, n, fs) = (first.channels(), first.nsamples(), first.sample_rate_hz);
    for w in windows {
        if w.channels() != c || w.nsamples() != n || w.sample_rate_hz != fs {
            return Err(Error::ShapeError(
                "windows disagree on channels, length, or sample rate".into(),
            ));
        }
    }
    let mut bytes = Vec::with_capacity(windows.len() * c * n * 8);
    for w in windows {
        for channel in 0..c {
            for i in 0..n {
                bytes.extend_from_slice(&w.samples[(channel, i)].to_le_bytes());
            }
        }
    }
    fs::write(bin_path, bytes)?;
    let ids: Vec<String> = windows.iter().map(|w| w.window_id.to_string()).collect();
    let sidecar = format!(
        "channels={c}\nsamples={n}\nsample_rate_hz={fs}\nwindow_ids={}\n",
        ids.join(",")
    );
    fs::write(sidecar_path, sidecar)?;
    Ok(())
}

/// Read windows written by [`write_windows`]. The sidecar must contain
/// exactly the four known keys; the binary length must match the layout
/// it declares.
pub fn read_windows(bin_path: &Path, sidecar_path: &Path) -> Result<Vec<TimeSeriesWindow>> {
    let sidecar = fs::read_to_string(sidecar_path)?;
    let mut channels = None;
    let mut samples = None;
    let mut sample_rate_hz = None;
    let mut window_ids: Option<Vec<u64>> = None;
    for (lineno, line) in sidecar.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidData(format!(
                "{}: line {} is not key=value",
                sidecar_path.display(),
                lineno + 1
            ))
        })?;
        let parse_err = |what: &str| {
            Error::InvalidData(format!(
                "{}: cannot parse {what} from {value:?}",
                sidecar_path.display()
            ))
        };
        match key {
            "channels" => channels = Some(value.parse::<usize>().map_err(|_| parse_err(key))?),
            "samples" => samples = Some(value.parse::<usize>().map_err(|_| parse_err(key))?),
            "sample_rate_hz" => {
                sample_rate_hz = Some(value.parse::<f64>().map_err(|_| parse_err(key))?)
            }
            "window_ids" => {
                let ids = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().map_err(|_| parse_err(key)))
                    .collect::<Result<Vec<u64>>>()?;
                window_ids = Some(ids);
            }
            other => {
                return Err(Error::InvalidData(format!(
                    "{}: unknown sidecar key {other:?}",
                    sidecar_path.display()
                )))
            }
        }
    }
    let c = channels
        .ok_or_else(|| Error::InvalidData("sidecar is missing the channels key".into()))?;
    let n =
        samples.ok_or_else(|| Error::InvalidData("sidecar is missing the samples key".into()))?;
    let fs_hz = sample_rate_hz
        .ok_or_else(|| Error::InvalidData("sidecar is missing the sample_rate_hz key".into()))?;
    let ids = window_ids
        .ok_or_else(|| Error::InvalidData("sidecar is missing the window_ids key".into()))?;

    let bytes = fs::read(bin_path)?;
    let expected = ids.len() * c * n * 8;
    if bytes.len() != expected {
        return Err(Error::InvalidData(format!(
            "{}: {} bytes, sidecar implies {expected}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let mut windows = Vec::with_capacity(ids.len());
    for (w, &id) in ids.iter().enumerate() {
        let base = w * c * n * 8;
        let samples = DMatrix::from_fn(c, n, |channel, i| {
            let o = base + (channel * n + i) * 8;
            f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8-byte slice"))
        });
        windows.push(TimeSeriesWindow::new(samples, fs_hz, id)?);
    }
    Ok(windows)
}

/// One metric observation in a run's long-format table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub mode: String,
    pub metric: String,
    /// Supervision strength column; empty for metrics without one.
    pub mu: String,
    pub value: f64,
}

/// Render metric rows as `mode,metric,mu,value` CSV. Floats use the
/// shortest round-trip decimal form, so identical bit patterns give
/// identical bytes.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("mode,metric,mu,value\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{},{}", row.mode, row.metric, row.mu, row.value);
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub const MANIFEST_NAME: &str = "manifest";

/// Write the run manifest: one `<sha256>  <name>` line per file, sorted
/// by name. Called last so the manifest covers every other file.
pub fn write_manifest(dir: &Path, names: &[String]) -> Result<()> {
    let mut sorted: Vec<&String> = names.iter().collect();
    sorted.sort();
    let mut out = String::new();
    for name in sorted {
        let hash = sha256_file(&dir.join(name))?;
        let _ = writeln!(out, "{hash}  {name}");
    }
    fs::write(dir.join(MANIFEST_NAME), out)?;
    Ok(())
}

/// Status of one file checked against a run manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileStatus {
    Ok,
    Missing,
    Mismatch,
    Unlisted,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub entries: Vec<(String, FileStatus)>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.entries.iter().all(|(_, s)| *s == FileStatus::Ok)
    }
}

/// Check every manifest entry's hash and flag files present in the
/// directory but absent from the manifest. Any non-Ok entry means the
/// run was mutated after finalization.
pub fn verify_manifest(dir: &Path) -> Result<VerifyReport> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.is_file() {
        return Err(Error::MissingInput(format!(
            "{} has no manifest; the run never finalized",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let mut entries = Vec::new();
    let mut listed = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (hash, name) = line.split_once("  ").ok_or_else(|| {
            Error::InvalidData(format!(
                "manifest line {} is not '<hash>  <name>'",
                lineno + 1
            ))
        })?;
        listed.push(name.to_string());
        let path = dir.join(name);
        let status = if !path.is_file() {
            FileStatus::Missing
        } else if sha256_file(&path)? != hash {
            FileStatus::Mismatch
        } else {
            FileStatus::Ok
        };
        entries.push((name.to_string(), status));
    }
    let mut unlisted: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != MANIFEST_NAME && entry.file_type()?.is_file() && !listed.contains(&name) {
            unlisted.push(PathBuf::from(name));
        }
    }
    unlisted.sort();
    for path in unlisted {
        entries.push((path.to_string_lossy().into_owned(), FileStatus::Unlisted));
    }
    Ok(VerifyReport { entries })
}
