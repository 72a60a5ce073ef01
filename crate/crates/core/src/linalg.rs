//! Small dense-linear-algebra helpers shared by the model modules:
//! observation centering, deterministically ordered symmetric
//! eigendecomposition, principal angles between column spans, and the
//! ridge fallback used when a Gram matrix is numerically singular.
//!
//! Matrices follow the crate-wide convention: rows are variables,
//! columns are observations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative ridge scale: when a Gram matrix `G` (d×d) cannot be factored,
/// `RIDGE_REL * trace(G) / d` is added to its diagonal once before the
/// second and final attempt.
pub const RIDGE_REL: f64 = 1e-8;

/// Returns an error if any entry is non-finite.
pub fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidData(format!("{what} contains a non-finite entry")))
    }
}

/// Row means of `m` (mean over observations for each variable).
pub fn row_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols() as f64;
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum() / n))
}

/// Subtracts `mean` from every column of `m`.
pub fn subtract_mean(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending
/// order. Ties keep the backend's original ordering (stable sort on the
/// original index), so results are deterministic. Returns
/// `(eigenvalues, eigenvectors)` with eigenvector `k` in column `k`.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_finite(m, "eigensolve input")?;
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::ShapeError(format!(
            "eigensolve input must be square, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalError(
            "eigendecomposition produced non-finite eigenvalues".into(),
        ));
    }
    Ok((values, vectors))
}

/// Scales `v` to unit Euclidean norm and flips its sign so the
/// largest-magnitude entry is positive. On magnitude ties the first such
/// entry decides, so the convention is deterministic.
pub fn normalize_with_sign(v: &mut DVector<f64>) {
    let norm = v.norm();
    if norm > 0.0 {
        *v /= norm;
    }
    let mut idx = 0;
    let mut best = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        *v = -&*v;
    }
}

/// Orthonormal basis for the column span of `m` (thin QR). `m` must have
/// full column rank; a zero column yields a SingularSystem error.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = m.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let scale = m.amax().max(1.0);
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)].abs() <= 1e-12 * scale {
            return Err(Error::SingularSystem(
                "column span is rank deficient; principal angles undefined".into(),
            ));
        }
    }
    Ok(q)
}

/// Principal angles (radians, ascending) between the column spans of `a`
/// and `b`. Both must live in the same ambient dimension and have full
/// column rank.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeError(format!(
            "subspaces live in different ambient dimensions: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let overlap = qa.transpose() * qb;
    let svd = overlap.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}

/// Largest principal angle between two column spans. When the spans have
/// different column counts this is the largest angle of the smaller one
/// against the larger.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let angles = principal_angles(a, b)?;
    Ok(angles.last().copied().unwrap_or(0.0))
}

/// Solves `G X = B` for symmetric positive semidefinite `G` via Cholesky.
/// If the first factorization fails, retries once with the relative ridge
/// `RIDGE_REL * trace(G)/d` added to the diagonal; a second failure is a
/// SingularSystem error.
pub fn solve_spd_with_ridge(g: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    debug_assert_eq!(g.nrows(), g.ncols());
    if let Some(chol) = g.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let d = g.nrows() as f64;
    let ridge = RIDGE_REL * g.trace() / d;
    let mut ridged = g.clone();
    for i in 0..g.nrows() {
        ridged[(i, i)] += ridge;
    }
    match ridged.cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(Error::SingularSystem(format!(
            "Gram matrix of dimension {} is singular even after ridge {ridge:.3e}",
            g.nrows()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn row_means_and_centering_leave_zero_sums() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let mean = row_means(&m);
        assert_relative_eq!(mean[0], 2.0);
        assert_relative_eq!(mean[1], 1.0);
        let c = subtract_mean(&m, &mean);
        for r in c.row_iter() {
            assert!(r.sum().abs() < 1e-12, "centered row sum {} not ~0", r.sum());
        }
    }

    #[test]
    fn eigen_sorts_descending_with_deterministic_ties() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0, 2.0, 5.0]));
        let (vals, vecs) = sorted_symmetric_eigen(&m).unwrap();
        assert_eq!(vals.as_slice(), &[5.0, 5.0, 2.0, 2.0]);
        let reconstructed = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert_relative_eq!(reconstructed, m, epsilon = 1e-12);
    }

    #[test]
    fn eigen_rejects_nonsquare_and_nonfinite() {
        let rect = DMatrix::zeros(2, 3);
        assert!(matches!(sorted_symmetric_eigen(&rect), Err(Error::ShapeError(_))));
        let mut bad = DMatrix::zeros(2, 2);
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(sorted_symmetric_eigen(&bad), Err(Error::InvalidData(_))));
    }

    #[test]
    fn sign_convention_flips_on_dominant_negative_entry() {
        let mut v = DVector::from_vec(vec![0.1, -2.0, 0.5]);
        normalize_with_sign(&mut v);
        assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-14);
        assert!(v[1] > 0.0, "dominant entry must be positive after flip");
        let mut w = DVector::from_vec(vec![3.0, 0.0]);
        normalize_with_sign(&mut w);
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn principal_angle_between_rotated_planes_matches_rotation() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let theta: f64 = 0.3;
        let b = DMatrix::from_column_slice(3, 1, &[theta.cos(), theta.sin(), 0.0]);
        let angle = max_principal_angle(&a, &b).unwrap();
        assert_relative_eq!(angle, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn principal_angle_zero_for_identical_span_under_mixing() {
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let mix = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 1.0]);
        let b = &a * mix;
        let angle = max_principal_angle(&a, &b).unwrap();
        assert!(angle < 1e-10, "same span must give ~0 angle, got {angle}");
    }

    #[test]
    fn spd_solve_applies_ridge_on_singular_gram() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let x = solve_spd_with_ridge(&g, &b).unwrap();
        let back = &g * &x;
        assert_relative_eq!(back[(0, 0)], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn spd_solve_rejects_indefinite_matrix() {
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let b = DMatrix::identity(2, 2);
        assert!(matches!(
            solve_spd_with_ridge(&g, &b),
            Err(Error::SingularSystem(_))
        ));
    }
}
