//! Dense kernels: vectors as `[f64]` slices, a row-major [`DenseMatrix`],
//! orthonormalization, numerical rank, symmetric eigendecomposition and
//! maximum-weight linear assignment.

mod assignment;
mod eigen;

pub use assignment::{hungarian_max, Assignment};
pub use eigen::{sym_eig, sym_eig_jacobi, sym_eig_tridiagonal, EigenSystem};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold used by [`numerical_rank`] callers
/// that do not configure their own.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, actual: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::DimensionMismatch { expected: rows, actual: c.len() });
            }
            for (i, &x) in c.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, actual: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, actual: x.len() });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `AᵀA` (when `rows >= cols`) or `AAᵀ` otherwise: the smaller Gram matrix.
    pub fn small_gram(&self) -> Self {
        if self.rows >= self.cols {
            let mut g = Self::zeros(self.cols, self.cols);
            for r in 0..self.rows {
                let row = self.row(r);
                for i in 0..self.cols {
                    let ri = row[i];
                    if ri == 0.0 {
                        continue;
                    }
                    for j in i..self.cols {
                        g.data[i * self.cols + j] += ri * row[j];
                    }
                }
            }
            g.mirror_upper();
            g
        } else {
            let mut g = Self::zeros(self.rows, self.rows);
            for i in 0..self.rows {
                for j in i..self.rows {
                    g.data[i * self.rows + j] = dot(self.row(i), self.row(j));
                }
            }
            g.mirror_upper();
            g
        }
    }

    fn mirror_upper(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in 0..i {
                self.data[i * n + j] = self.data[j * n + i];
            }
        }
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::NotSquare { rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                s.data[i * n + j] = avg;
                s.data[j * n + i] = avg;
            }
        }
        Ok(s)
    }

    /// Adds `alpha * u vᵀ` in place.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let a = alpha * ui;
            if a != 0.0 {
                axpy(a, v, self.row_mut(i));
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Orthonormalizes `vectors` in order with modified Gram-Schmidt (two
/// projection passes per vector). A vector whose residual norm falls below
/// `drop_tol` is dropped; the survivors keep their input order.
pub fn gram_schmidt(vectors: &[Vec<f64>], drop_tol: f64) -> Result<Vec<Vec<f64>>> {
    gram_schmidt_indexed(vectors, drop_tol).map(|kept| kept.into_iter().map(|(_, v)| v).collect())
}

/// Like [`gram_schmidt`] but also reports which input each output came from.
pub fn gram_schmidt_indexed(vectors: &[Vec<f64>], drop_tol: f64) -> Result<Vec<(usize, Vec<f64>)>> {
    if !(drop_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("drop_tol must be positive, got {drop_tol}")));
    }
    let Some(first) = vectors.first() else {
        return Ok(Vec::new());
    };
    let dim = first.len();
    let mut basis: Vec<(usize, Vec<f64>)> = Vec::new();
    for (idx, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
        }
        let mut r = v.clone();
        for _ in 0..2 {
            for (_, q) in &basis {
                let c = dot(q, &r);
                axpy(-c, q, &mut r);
            }
        }
        let n = norm(&r);
        if n < drop_tol {
            continue;
        }
        scale(1.0 / n, &mut r);
        basis.push((idx, r));
    }
    Ok(basis)
}

/// Singular values of `m` in descending order, from the eigenvalues of the
/// smaller Gram matrix.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.all_finite() {
        return Err(Error::NonFinite("matrix passed to singular_values".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Vec::new());
    }
    let gram = m.small_gram();
    let eig = sym_eig(&gram)?;
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect())
}

/// Number of singular values strictly above `rel_tol * σ_max`; zero for the
/// zero matrix.
pub fn numerical_rank(m: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!("rel_tol must lie in (0,1), got {rel_tol}")));
    }
    let sv = singular_values(m)?;
    Ok(rank_from_singular_values(&sv, rel_tol))
}

pub fn rank_from_singular_values(sv: &[f64], rel_tol: f64) -> usize {
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..count).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn gram_schmidt_axis_case() {
        let out = gram_schmidt(&[vec![1.0, 0.0], vec![1.0, 1.0]], 1e-8).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn gram_schmidt_drops_dependent() {
        let out = gram_schmidt(&[vec![1.0, 0.0], vec![2.0, 0.0]], 1e-8).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0]]);
    }

    #[test]
    fn gram_schmidt_random_orthonormal() {
        let vs = random_vectors(5, 10, 3);
        let out = gram_schmidt(&vs, 1e-8).unwrap();
        assert_eq!(out.len(), 5);
        for i in 0..5 {
            assert!((norm(&out[i]) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&out[i], &out[j]).abs() < 1e-10);
            }
        }
        // span preserved: each input is reproduced by its projection
        for v in &vs {
            let mut proj = vec![0.0; 10];
            for q in &out {
                axpy(dot(q, v), q, &mut proj);
            }
            assert!(max_abs_diff(&proj, v) < 1e-10);
        }
    }

    #[test]
    fn gram_schmidt_edge_cases() {
        assert!(gram_schmidt(&[], 1e-8).unwrap().is_empty());
        assert!(matches!(
            gram_schmidt(&[vec![1.0], vec![1.0, 2.0]], 1e-8),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&DenseMatrix::identity(3), 1e-6).unwrap(), 3);
        let v = vec![0.3, -1.2, 2.0, 0.7];
        let m = DenseMatrix::from_columns(&[v.clone(), v]).unwrap();
        assert_eq!(numerical_rank(&m, 1e-6).unwrap(), 1);
        assert_eq!(numerical_rank(&DenseMatrix::zeros(4, 3), 1e-6).unwrap(), 0);
    }

    #[test]
    fn rank_of_rotated_span() {
        // e = V Q with Q a random orthogonal CxC matrix stays inside span{V}
        let c = 4;
        let vs = gram_schmidt(&random_vectors(c, 30, 11), 1e-8).unwrap();
        let q = gram_schmidt(&random_vectors(c, c, 12), 1e-8).unwrap();
        let mut cols = vs.clone();
        for qj in &q {
            let mut e = vec![0.0; 30];
            for (k, v) in vs.iter().enumerate() {
                axpy(qj[k], v, &mut e);
            }
            cols.push(e);
        }
        let m = DenseMatrix::from_columns(&cols).unwrap();
        assert_eq!(numerical_rank(&m, 1e-6).unwrap(), c);
        assert_eq!(numerical_rank(&m.transpose(), 1e-6).unwrap(), c);
    }

    #[test]
    fn rank_rejects_non_finite() {
        let m = DenseMatrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(numerical_rank(&m, 1e-6), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_and_transpose() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = a.transpose().matmul(&a).unwrap();
        assert_eq!(g, a.small_gram());
        assert_eq!(g.as_slice(), &[35.0, 44.0, 44.0, 56.0]);
    }
}
