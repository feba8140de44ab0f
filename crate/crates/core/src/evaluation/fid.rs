use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Eigenvalues below this are treated as numerical noise and clamped.
const NEGATIVE_TOLERANCE: f64 = -1e-8;

fn gaussian_fit(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mean = DVector::zeros(dim);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| {
        if l < NEGATIVE_TOLERANCE {
            log::warn!("clamping eigenvalue {l:e} in covariance square root");
        }
        l.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` with unbiased
/// covariances. The trace of the cross term is computed as
/// `Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`, which is symmetric and equal.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "FID needs at least 2 vectors per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Dimension("FID feature vectors differ in length".into()));
    }
    let (mu_a, cov_a) = gaussian_fit(a, dim);
    let (mu_b, cov_b) = gaussian_fit(b, dim);
    let root_a = sqrt_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let cross = sqrt_psd(inner).trace();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}
