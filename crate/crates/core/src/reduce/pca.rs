use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram, matmul_transposed, symmetric_eigen, thin_svd, Matrix};

/// Above this many input entries the fit goes through the Gram matrix
/// instead of a full thin SVD, which would need several copies of `x`.
const DIRECT_SVD_MAX_ENTRIES: usize = 8_000_000;

/// Uncentered PCA: the origin maps to the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// `[k, dim]`, orthonormal rows.
    pub basis: Matrix,
    /// Descending; components beyond the data rank are zero.
    pub singular_values: Vec<f64>,
    /// `s_i^2 / sum(s^2)` over all singular values of the fit data.
    pub explained: Vec<f64>,
    pub fitted_on: String,
    pub centered: bool,
    /// Number of trailing components that exceed the data rank.
    pub rank_deficient: usize,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        pca_transform(self, x)
    }
}

/// Fits the top `k` right singular vectors of `x` as-is, without
/// subtracting a mean.
pub fn pca_fit(x: &Matrix, k: usize, fitted_on: &str) -> Result<PcaModel> {
    let (n, dim) = x.shape();
    if n == 0 {
        return Err(Error::Validation("PCA needs at least one row".into()));
    }
    if k == 0 || k > n.min(dim) {
        return Err(Error::Validation(format!(
            "PCA component count {k} outside 1..={} for a {n}x{dim} input",
            n.min(dim)
        )));
    }
    let (all_s, vt) = if n * dim <= DIRECT_SVD_MAX_ENTRIES {
        let svd = thin_svd(x)?;
        (svd.s, svd.vt)
    } else {
        if !x.is_finite() {
            return Err(Error::Domain("PCA input has non-finite entries".into()));
        }
        let eig = symmetric_eigen(&gram(x))?;
        let s = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
        (s, eig.vectors.transpose())
    };

    let total: f64 = all_s.iter().map(|s| s * s).sum();
    let tol = all_s.first().copied().unwrap_or(0.0) * n.max(dim) as f64 * f64::EPSILON;
    let rank = all_s.iter().filter(|&&s| s > tol).count();
    let mut singular_values: Vec<f64> = all_s[..k].to_vec();
    let rank_deficient = k.saturating_sub(rank);
    for s in singular_values.iter_mut().skip(rank) {
        *s = 0.0;
    }
    if rank_deficient > 0 {
        log::warn!(
            "PCA asked for {k} components but the data has rank {rank}; \
             the last {rank_deficient} carry no variance"
        );
    }
    let explained = singular_values
        .iter()
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        basis: vt.slice_rows(0..k),
        singular_values,
        explained,
        fitted_on: fitted_on.to_string(),
        centered: false,
        rank_deficient,
    })
}

/// `x · basisᵀ`.
pub fn pca_transform(m: &PcaModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != m.dim() {
        return Err(Error::Shape(format!(
            "PCA model expects width {}, got {}",
            m.dim(),
            x.cols()
        )));
    }
    matmul_transposed(x, &m.basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_through_origin() {
        let dir = [0.6, 0.8, 0.0];
        let rows: Vec<Vec<f64>> = (1..=5)
            .map(|t| dir.iter().map(|d| d * t as f64).collect())
            .collect();
        let m = pca_fit(&Matrix::from_rows(&rows).unwrap(), 2, "line").unwrap();
        let b0 = m.basis.row(0);
        assert!((crate::linalg::dot(b0, &dir).abs() - 1.0).abs() < 1e-12);
        assert_eq!(m.singular_values[1], 0.0);
        assert_eq!(m.rank_deficient, 1);
        assert!((m.explained[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn origin_maps_to_origin() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let m = pca_fit(&x, 2, "t").unwrap();
        let z = pca_transform(&m, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert!(pca_transform(&m, &Matrix::zeros(1, 3)).is_err());
        assert!(pca_fit(&x, 3, "t").is_err());
    }

    #[test]
    fn basis_row_maps_to_axis() {
        let x = Matrix::from_rows(&[vec![3.0, 1.0, 0.0], vec![1.0, 2.0, 1.0], vec![0.0, 1.0, 4.0]])
            .unwrap();
        let m = pca_fit(&x, 3, "t").unwrap();
        let e1 = Matrix::new(1, 3, m.basis.row(1).to_vec()).unwrap();
        let y = pca_transform(&m, &e1).unwrap();
        assert!(y.get(0, 0).abs() < 1e-12 && y.get(0, 2).abs() < 1e-12);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-12);
    }
}
