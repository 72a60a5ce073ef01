//! Reader and fixture writer for the IDX binary format used by the
//! clothing-image corpus: a big-endian header (two zero bytes, a dtype
//! byte, a dimension-count byte, then one u32 per dimension) followed by
//! raw row-major data.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const DTYPE_U8: u8 = 0x08;

fn parse_header(bytes: &[u8], path: &Path, expect_dims: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(Error::InvalidData(format!(
            "{}: file too short for an IDX header",
            path.display()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::InvalidData(format!(
            "{}: bad IDX magic bytes {:#04x} {:#04x}",
            path.display(),
            bytes[0],
            bytes[1]
        )));
    }
    if bytes[2] != DTYPE_U8 {
        return Err(Error::InvalidData(format!(
            "{}: unsupported IDX dtype {:#04x}, expected unsigned bytes",
            path.display(),
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims != expect_dims {
        return Err(Error::InvalidData(format!(
            "{}: IDX has {ndims} dimensions, expected {expect_dims}",
            path.display()
        )));
    }
    if bytes.len() < 4 + 4 * ndims {
        return Err(Error::InvalidData(format!(
            "{}: file too short for {ndims} dimension sizes",
            path.display()
        )));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected_len = 4 + 4 * ndims + dims.iter().product::<usize>();
    if bytes.len() != expected_len {
        return Err(Error::InvalidData(format!(
            "{}: IDX payload is {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            expected_len
        )));
    }
    Ok(dims)
}

/// Read a 3-dimensional IDX image file into a pixels×images matrix.
/// Column j holds image j flattened row-major; byte values are scaled to
/// [0, 1] by dividing by 255.
pub fn read_idx_images(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    let dims = parse_header(&bytes, path, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = rows * cols;
    if n == 0 || pixels == 0 {
        return Err(Error::InvalidData(format!(
            "{}: empty image set {n}×{rows}×{cols}",
            path.display()
        )));
    }
    let data = &bytes[4 + 12..];
    Ok(DMatrix::from_fn(pixels, n, |i, j| {
        data[j * pixels + i] as f64 / 255.0
    }))
}

/// Read a 1-dimensional IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let dims = parse_header(&bytes, path, 1)?;
    if dims[0] == 0 {
        return Err(Error::InvalidData(format!(
            "{}: empty label set",
            path.display()
        )));
    }
    Ok(bytes[4 + 4..].to_vec())
}

/// Write a pixels×images matrix of [0, 1] values as an IDX image file
/// with the given image geometry. Fixture support for tests and local
/// corpora; values are scaled by 255 and rounded.
pub fn write_idx_images(path: &Path, images: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != images.nrows() {
        return Err(Error::ShapeError(format!(
            "{rows}×{cols} geometry does not match {} pixel rows",
            images.nrows()
        )));
    }
    if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidData(
            "image values must lie in [0, 1] for IDX export".into(),
        ));
    }
    let n = images.ncols();
    let mut bytes = Vec::with_capacity(16 + n * rows * cols);
    bytes.extend_from_slice(&[0, 0, DTYPE_U8, 3]);
    for dim in [n, rows, cols] {
        bytes.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for j in 0..n {
        for i in 0..rows * cols {
            bytes.push((images[(i, j)] * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write labels as a 1-dimensional IDX file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&[0, 0, DTYPE_U8, 1]);
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}
