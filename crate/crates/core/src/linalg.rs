//! Dense row-major linear algebra for latent matrices: products, norms and
//! a thin SVD.
//!
//! Latent matrices are tall and thin (one row per latent state), so
//! [`thin_svd`] warm-starts a one-sided Jacobi iteration from the
//! eigenvectors of the Gram matrix whenever `rows >= 2 * cols`.

#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep cap shared by both Jacobi iterations.
pub const MAX_SWEEPS: usize = 100;

const PAIR_TOL: f64 = 1e-15;
const GRAM_MAX_COLS: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { data, ..*self })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L2 norm of an f32 slice, accumulated in f64.
#[inline]
pub fn norm_f32(a: &[f32]) -> f64 {
    a.iter()
        .map(|&v| {
            let v = f64::from(v);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_transposed of {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · a`, symmetric.
pub fn gram(a: &Matrix) -> Matrix {
    let c = a.cols;
    let mut g = Matrix::zeros(c, c);
    for row in a.iter_rows() {
        for (i, &ri) in row.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            let gi = &mut g.data[i * c..(i + 1) * c];
            for (gij, &rj) in gi[i..].iter_mut().zip(&row[i..]) {
                *gij += ri * rj;
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            g.data[i * c + j] = g.data[j * c + i];
        }
    }
    g
}

#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows × r` with orthonormal columns, `r = min(rows, cols)`.
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `r × cols` with orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.s) {
                *v *= s;
            }
        }
        matmul(&us, &self.vt).expect("svd factors are conformant")
    }
}

pub fn thin_svd(x: &Matrix) -> Result<Svd> {
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::Domain(format!(
            "thin_svd needs a non-empty matrix, got {}x{}",
            x.rows, x.cols
        )));
    }
    if let Some(i) = x.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "thin_svd input has a non-finite entry at ({}, {})",
            i / x.cols,
            i % x.cols
        )));
    }
    if x.rows < x.cols {
        let t = thin_svd(&x.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }

    let (rows, cols) = x.shape();
    // column-major working copies
    let mut v: Vec<Vec<f64>>;
    let mut a: Vec<Vec<f64>>;
    if rows >= 2 * cols && cols <= GRAM_MAX_COLS && cols > 1 {
        let eig = symmetric_eigen(&gram(x))?;
        v = (0..cols).map(|j| eig.vectors.column(j)).collect();
        let xv = matmul(x, &eig.vectors)?;
        a = (0..cols).map(|j| xv.column(j)).collect();
    } else {
        v = (0..cols)
            .map(|j| {
                let mut e = vec![0.0; cols];
                e[j] = 1.0;
                e
            })
            .collect();
        a = (0..cols).map(|j| x.column(j)).collect();
    }

    one_sided_jacobi(&mut a, &mut v)?;

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if s[k] > 0.0 {
            u_cols.push(a[j].iter().map(|v| v / s[k]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &missing);

    let mut u = Matrix::zeros(rows, cols);
    for (k, col) in u_cols.iter().enumerate() {
        for (r, &val) in col.iter().enumerate() {
            u.data[r * cols + k] = val;
        }
    }
    let mut vt = Matrix::zeros(cols, cols);
    for (k, &j) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    Ok(Svd { u, s, vt })
}

/// Hestenes iteration: rotates column pairs of `a` (and `v` alongside) until
/// every pair is orthogonal to working precision.
fn one_sided_jacobi(a: &mut [Vec<f64>], v: &mut [Vec<f64>]) -> Result<()> {
    let n = a.len();
    if n < 2 {
        return Ok(());
    }
    let mut sq: Vec<f64> = a.iter().map(|c| dot(c, c)).collect();
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = sq[p];
                let beta = sq[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= PAIR_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                sq[p] = dot(&a[p], &a[p]);
                sq[q] = dot(&a[q], &a[q]);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::Numeric(format!(
        "one-sided Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
    )))
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to all
/// other columns (two-pass Gram–Schmidt over the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0usize;
    for &m in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == m || (missing.contains(&k) && norm(c) == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(ei, ci)| *ei -= proj * ci);
                }
            }
            let n = norm(&e);
            if n > 1e-8 {
                cols[m] = e.iter().map(|v| v / n).collect();
                break;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, ordered like `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<SymmetricEigen> {
    let n = m.rows;
    if n != m.cols {
        return Err(Error::Shape(format!(
            "symmetric_eigen needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let mut converged = n < 2 || scale == 0.0;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J on rows/cols p and q
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge within {MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, k, v.get(r, j));
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Classic largest-pivot Jacobi on a symmetric matrix; returns the
    /// eigenvalues sorted descending. Kept separate from the library routine.
    fn oracle_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
        for _ in 0..100 * n * n {
            let (mut p, mut q, mut best) = (0, 1, 0.0);
            for i in 0..n {
                for j in i + 1..n {
                    if a[i][j].abs() > best {
                        best = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if best < 1e-14 {
                break;
            }
            let phi = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
            let (s, c) = phi.sin_cos();
            for k in 0..n {
                let (kp, kq) = (a[k][p], a[k][q]);
                a[k][p] = c * kp - s * kq;
                a[k][q] = s * kp + c * kq;
            }
            for k in 0..n {
                let (pk, qk) = (a[p][k], a[q][k]);
                a[p][k] = c * pk - s * qk;
                a[q][k] = s * pk + c * qk;
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn identity_product() {
        let a = random(3, 3, 1);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let a = random(17, 5, 2);
        let b = random(5, 9, 3);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        let diff = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn product_shape_error() {
        let err = random(2, 3, 0).matmul(&random(2, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn svd_of_diagonal() {
        let svd = thin_svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        for (got, want) in svd.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_of_rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let svd = thin_svd(&x).unwrap();
        let expected = norm(&u) * norm(&v);
        assert!((svd.s[0] - expected).abs() < 1e-12 * expected);
        assert!(svd.s[1..].iter().all(|s| s.abs() < 1e-12));
        assert_orthonormal_columns(&svd.u, 1e-10);
        assert_orthonormal_columns(&svd.vt.transpose(), 1e-10);
    }

    #[test]
    fn svd_matches_gram_eigenvalues() {
        let x = random(50, 20, 11);
        let svd = thin_svd(&x).unwrap();
        let ev = oracle_eigenvalues(&gram(&x));
        for (s, l) in svd.s.iter().zip(&ev) {
            assert!((s * s - l).abs() <= 1e-8 * l.abs().max(1e-300), "{s} {l}");
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut x = random(4, 3, 5);
        x.set(2, 1, f64::NAN);
        assert!(matches!(thin_svd(&x), Err(Error::Domain(_))));
    }

    #[test]
    fn tall_path_reconstructs() {
        // rows >= 2 * cols takes the Gram warm start
        let x = random(300, 12, 9);
        check_svd(&x);
        let wide = random(7, 30, 10);
        check_svd(&wide);
    }

    #[test]
    fn rank_deficient_tall_matrix_gets_orthonormal_u() {
        let base = random(100, 3, 4);
        let mix = random(3, 8, 5);
        let x = base.matmul(&mix).unwrap();
        let svd = check_svd(&x);
        assert!(svd.s[3..].iter().all(|&s| s < 1e-10 * svd.s[0]));
    }

    fn check_svd(x: &Matrix) -> Svd {
        let svd = thin_svd(x).unwrap();
        let rel = x.sub(&svd.reconstruct()).unwrap().frobenius_norm() / x.frobenius_norm();
        assert!(rel < 1e-8, "reconstruction {rel}");
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.s.iter().all(|&s| s >= 0.0));
        assert_orthonormal_columns(&svd.u, 1e-10);
        assert_orthonormal_columns(&svd.vt.transpose(), 1e-10);
        svd
    }

    fn assert_orthonormal_columns(m: &Matrix, tol: f64) {
        let g = gram(m);
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < tol, "({i},{j}) = {}", g.get(i, j));
            }
        }
    }

    #[test]
    fn symmetric_eigen_reconstructs() {
        let x = random(10, 6, 21);
        let g = gram(&x);
        let eig = symmetric_eigen(&g).unwrap();
        let mut vd = eig.vectors.clone();
        for r in 0..vd.rows() {
            for (v, l) in vd.row_mut(r).iter_mut().zip(&eig.values) {
                *v *= l;
            }
        }
        let back = matmul_transposed(&vd, &eig.vectors).unwrap();
        assert!(back.sub(&g).unwrap().frobenius_norm() < 1e-10 * g.frobenius_norm());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn svd_invariants(rows in 1usize..24, cols in 1usize..12, seed in any::<u64>()) {
                let x = random(rows, cols, seed);
                let svd = thin_svd(&x).unwrap();
                let rel = x.sub(&svd.reconstruct()).unwrap().frobenius_norm() / x.frobenius_norm();
                prop_assert!(rel < 1e-8);
                let vvt = matmul_transposed(&svd.vt, &svd.vt).unwrap();
                for i in 0..vvt.rows() {
                    for j in 0..vvt.cols() {
                        let want = if i == j { 1.0 } else { 0.0 };
                        prop_assert!((vvt.get(i, j) - want).abs() < 1e-10);
                    }
                }
            }

            #[test]
            fn singular_values_ignore_row_order(rows in 2usize..20, cols in 1usize..8, seed in any::<u64>()) {
                let x = random(rows, cols, seed);
                let mut idx: Vec<usize> = (0..rows).collect();
                idx.reverse();
                idx.rotate_left(seed as usize % rows);
                let a = thin_svd(&x).unwrap().s;
                let b = thin_svd(&x.select_rows(&idx)).unwrap().s;
                for (p, q) in a.iter().zip(&b) {
                    prop_assert!((p - q).abs() < 1e-10);
                }
            }
        }
    }
}
