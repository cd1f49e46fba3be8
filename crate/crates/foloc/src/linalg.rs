//! Dense linear-algebra helpers: SVD-based pseudoinverse, numerical rank,
//! spectral norms, and their complex counterparts.
//!
//! Every rank decision in the crate goes through the same tolerance rule:
//! singular values below `max(rows, cols) * eps * sigma_max` are treated as
//! zero unless the caller overrides the threshold.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

const SVD_EPS: f64 = f64::EPSILON;
const SVD_MAX_ITER: usize = 50_000;

/// Default rank tolerance for a matrix with the given shape and largest
/// singular value.
pub fn default_rank_tol(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

fn svd_real(mat: &DMatrix<f64>) -> Result<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if mat.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    mat.clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))
}

/// Moore-Penrose pseudoinverse together with the numerical rank used.
pub fn pinv_with_rank(mat: &DMatrix<f64>, rank_tol: Option<f64>) -> Result<(DMatrix<f64>, usize)> {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return Ok((DMatrix::zeros(mat.ncols(), mat.nrows()), 0));
    }
    let svd = svd_real(mat)?;
    let sigma_max = svd.singular_values.max();
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(mat.nrows(), mat.ncols(), sigma_max));
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut rank = 0;
    let inv_s = DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values.iter().map(|&s| {
            if s > tol {
                rank += 1;
                1.0 / s
            } else {
                0.0
            }
        }),
    );
    // pinv = V * S^+ * U^T, assembled as (S^+ U^T) scaled row-wise.
    let mut sut = u.transpose();
    for (i, row) in inv_s.iter().enumerate() {
        sut.row_mut(i).scale_mut(*row);
    }
    Ok((v_t.transpose() * sut, rank))
}

/// Moore-Penrose pseudoinverse of a real matrix.
///
/// Singular values below `rank_tol` (default: `max(dim) * eps * sigma_max`)
/// are treated as zero.
pub fn pinv(mat: &DMatrix<f64>, rank_tol: Option<f64>) -> Result<DMatrix<f64>> {
    pinv_with_rank(mat, rank_tol).map(|(p, _)| p)
}

/// Numerical rank of a real matrix.
pub fn numerical_rank(mat: &DMatrix<f64>, rank_tol: Option<f64>) -> Result<usize> {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return Ok(0);
    }
    let sv = mat
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?
        .singular_values;
    let sigma_max = sv.max();
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(mat.nrows(), mat.ncols(), sigma_max));
    Ok(sv.iter().filter(|&&s| s > tol).count())
}

/// Largest singular value of a real matrix (0 for empty matrices).
pub fn spectral_norm(mat: &DMatrix<f64>) -> Result<f64> {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return Ok(0.0);
    }
    let sv = mat
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?
        .singular_values;
    Ok(sv.max())
}

/// Induced 1-norm (maximum absolute column sum).
pub fn induced_one_norm(mat: &DMatrix<f64>) -> f64 {
    (0..mat.ncols())
        .map(|j| mat.column(j).iter().map(|x| x.abs()).sum())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum (induced infinity norm).
pub fn induced_inf_norm(mat: &DMatrix<f64>) -> f64 {
    (0..mat.nrows())
        .map(|i| mat.row(i).iter().map(|x| x.abs()).sum())
        .fold(0.0, f64::max)
}

fn svd_complex(
    mat: &DMatrix<Complex<f64>>,
) -> Result<nalgebra::SVD<Complex<f64>, nalgebra::Dyn, nalgebra::Dyn>> {
    mat.clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("complex SVD did not converge".into()))
}

/// Numerical rank of a complex matrix.
pub fn numerical_rank_complex(
    mat: &DMatrix<Complex<f64>>,
    rank_tol: Option<f64>,
) -> Result<usize> {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return Ok(0);
    }
    let sv = mat
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("complex SVD did not converge".into()))?
        .singular_values;
    let sigma_max = sv.max();
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(mat.nrows(), mat.ncols(), sigma_max));
    Ok(sv.iter().filter(|&&s| s > tol).count())
}

/// Largest singular value of a complex matrix.
pub fn spectral_norm_complex(mat: &DMatrix<Complex<f64>>) -> Result<f64> {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return Ok(0.0);
    }
    let sv = mat
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("complex SVD did not converge".into()))?
        .singular_values;
    Ok(sv.max())
}

/// Moore-Penrose pseudoinverse of a complex matrix.
pub fn pinv_complex(
    mat: &DMatrix<Complex<f64>>,
    rank_tol: Option<f64>,
) -> Result<DMatrix<Complex<f64>>> {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return Ok(DMatrix::zeros(mat.ncols(), mat.nrows()));
    }
    let svd = svd_complex(mat)?;
    let sigma_max = svd.singular_values.max();
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(mat.nrows(), mat.ncols(), sigma_max));
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut sut = u.adjoint();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let f = if s > tol { 1.0 / s } else { 0.0 };
        sut.row_mut(i).scale_mut(f);
    }
    Ok(v_t.adjoint() * sut)
}

/// Smallest nonzero eigenvalue of a symmetric PSD matrix, with a flag telling
/// whether the matrix has full rank at the tolerance.
pub fn smallest_nonzero_eigenvalue(
    mat: &DMatrix<f64>,
    rank_tol: Option<f64>,
) -> Result<(f64, bool)> {
    if !mat.is_square() {
        return Err(Error::Dimension("eigenvalue routine needs a square matrix".into()));
    }
    if mat.nrows() == 0 {
        return Ok((0.0, true));
    }
    let sym = (mat + mat.transpose()).scale(0.5);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let lambda_max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(mat.nrows(), mat.ncols(), lambda_max));
    let mut smallest = f64::INFINITY;
    let mut deficient = false;
    for &l in eig.eigenvalues.iter() {
        if l.abs() > tol {
            smallest = smallest.min(l.abs());
        } else {
            deficient = true;
        }
    }
    if smallest.is_infinite() {
        // All eigenvalues are numerically zero.
        return Ok((0.0, false));
    }
    Ok((smallest, !deficient))
}

/// Converts a real matrix into a complex one.
pub fn to_complex(mat: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    mat.map(|x| Complex::new(x, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pinv_identity_is_identity() {
        let eye = DMatrix::<f64>::identity(4, 4);
        let p = pinv(&eye, None).unwrap();
        assert_relative_eq!(p, eye, epsilon = 1e-12);
    }

    #[test]
    fn pinv_zero_matrix_is_zero_transpose_shape() {
        let z = DMatrix::<f64>::zeros(3, 5);
        let p = pinv(&z, None).unwrap();
        assert_eq!(p.shape(), (5, 3));
        assert_eq!(p.amax(), 0.0);
    }

    #[test]
    fn pinv_diagonal_inverts_nonzero_entries() {
        let d = DMatrix::from_partial_diagonal(2, 2, &[2.0, 0.0]);
        let p = pinv(&d, None).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.5, epsilon = 1e-14);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn pinv_satisfies_penrose_identities() {
        for (rows, cols, seed) in [(20, 7, 1), (7, 20, 2), (15, 15, 3), (30, 12, 4)] {
            let x = random_matrix(rows, cols, seed);
            let p = pinv(&x, None).unwrap();
            let scale = spectral_norm(&x).unwrap();
            assert!((&x * &p * &x - &x).amax() <= 1e-10 * scale);
            assert!((&p * &x * &p - &p).amax() <= 1e-10 / scale.max(1e-300));
            let xp = &x * &p;
            let px = &p * &x;
            assert!((&xp - xp.transpose()).amax() <= 1e-10);
            assert!((&px - px.transpose()).amax() <= 1e-10);
        }
    }

    #[test]
    fn rank_deficient_matrix_detected() {
        let mut x = random_matrix(10, 4, 5);
        let dup = x.column(0).into_owned();
        x.set_column(3, &dup);
        assert_eq!(numerical_rank(&x, None).unwrap(), 3);
    }

    #[test]
    fn complex_rank_matches_real_embedding() {
        let re = random_matrix(6, 4, 7);
        let im = random_matrix(6, 4, 8);
        let c = DMatrix::from_fn(6, 4, |i, j| Complex::new(re[(i, j)], im[(i, j)]));
        assert_eq!(numerical_rank_complex(&c, None).unwrap(), 4);
        let p = pinv_complex(&c, None).unwrap();
        let back = &c * &p * &c;
        assert!((&back - &c).map(|z| z.norm()).max() < 1e-10);
    }

    #[test]
    fn smallest_nonzero_eigenvalue_of_projector() {
        // Projector onto a 2-dimensional subspace: eigenvalues {1, 1, 0}.
        let q = random_matrix(3, 2, 9);
        let qr = q.qr();
        let qmat = qr.q();
        let proj = &qmat * qmat.transpose();
        let (least, full) = smallest_nonzero_eigenvalue(&proj, None).unwrap();
        assert_relative_eq!(least, 1.0, epsilon = 1e-10);
        assert!(!full);
    }
}
