//! Dense symmetric and positive-definite matrix analysis.
//!
//! Square roots and Loewner comparisons go through the symmetric
//! eigendecomposition; norms and mininorms through the SVD. Everything here
//! is a pure function of its inputs.

use nalgebra::{Complex, DMatrix, Schur, SymmetricEigen, SVD};
use serde::Serialize;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Maximum tolerated asymmetry, relative to the Frobenius norm, before
/// symmetrization.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Positivity threshold: the smallest eigenvalue must exceed this fraction of
/// the largest one.
pub const POSITIVITY_THRESHOLD: f64 = 1e-12;

pub(crate) fn check_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix has non-finite entries".into()))
    }
}

pub(crate) fn check_square(m: &Matrix) -> Result<()> {
    if m.is_square() && m.nrows() > 0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("expected a square matrix, got {}x{}", m.nrows(), m.ncols())))
    }
}

/// Singular value decomposition with singular values sorted in decreasing
/// order. Returns `(U, sigma, V)` with `m = U diag(sigma) V^T`.
pub fn svd_sorted(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    check_finite(m)?;
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = Matrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_sorted = Matrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    Ok((u_sorted, sigma, v_sorted))
}

/// Singular values in decreasing order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    check_finite(m)?;
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Largest singular value: sup of |Mv| over unit v.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Smallest singular value: inf of |Mv| over unit v.
pub fn mininorm(m: &Matrix) -> Result<f64> {
    check_square(m)?;
    Ok(singular_values(m)?.last().copied().unwrap_or(0.0))
}

/// Spectral norm of a symmetric matrix from its eigenvalues.
pub fn symmetric_norm(m: &Matrix) -> Result<f64> {
    let s = SymmetricMatrix::new(m.clone())?;
    let eig = s.eigenvalues();
    Ok(eig.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())))
}

/// Distance of `m` from the orthogonal group, measured as |M^T M - I|.
pub fn orthogonality_defect(m: &Matrix) -> Result<f64> {
    check_square(m)?;
    check_finite(m)?;
    let gram = m.transpose() * m - Matrix::identity(m.nrows(), m.ncols());
    symmetric_norm(&gram)
}

pub fn inverse(m: &Matrix) -> Result<Matrix> {
    check_square(m)?;
    check_finite(m)?;
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("matrix is singular".into()))
}

/// Sign and natural log of |det m|, from one LU factorization.
pub fn log_abs_det(m: &Matrix) -> Result<(f64, f64)> {
    check_square(m)?;
    check_finite(m)?;
    let lu = m.clone().lu();
    let mut sign: f64 = lu.p().determinant();
    let mut log_abs = 0.0;
    let u = lu.u();
    for i in 0..u.nrows() {
        let x = u[(i, i)];
        if x == 0.0 {
            return Ok((0.0, f64::NEG_INFINITY));
        }
        sign *= x.signum();
        log_abs += x.abs().ln();
    }
    Ok((sign, log_abs))
}

/// Eigenvalues of a general square matrix, via the real Schur form.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    check_square(m)?;
    check_finite(m)?;
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::InvalidInput("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Rotation of the plane by `theta` radians.
pub fn rotation(theta: f64) -> Matrix {
    let (s, c) = theta.sin_cos();
    Matrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Block-diagonal assembly.
pub fn block_diagonal(blocks: &[Matrix]) -> Matrix {
    let d: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(d, d);
    let mut offset = 0;
    for b in blocks {
        out.view_mut((offset, offset), (b.nrows(), b.ncols())).copy_from(b);
        offset += b.nrows();
    }
    out
}

/// A symmetric matrix, exactly symmetric after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    inner: Matrix,
}

impl SymmetricMatrix {
    /// Symmetrizes `(M + M^T)/2`; fails if the input was visibly asymmetric.
    pub fn new(m: Matrix) -> Result<Self> {
        check_square(&m)?;
        check_finite(&m)?;
        let asym = (&m - m.transpose()).norm();
        let tolerance = SYMMETRY_TOLERANCE * m.norm();
        if asym > tolerance {
            return Err(Error::NotSymmetric { asymmetry: asym, tolerance });
        }
        let inner = (&m + m.transpose()) * 0.5;
        Ok(SymmetricMatrix { inner })
    }

    pub fn identity(dim: usize) -> Self {
        SymmetricMatrix { inner: Matrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix {
        self.inner
    }

    pub fn scale(&self, factor: f64) -> SymmetricMatrix {
        SymmetricMatrix { inner: &self.inner * factor }
    }

    pub fn sub(&self, other: &SymmetricMatrix) -> Result<SymmetricMatrix> {
        same_dim(self.dim(), other.dim())?;
        SymmetricMatrix::new(&self.inner - &other.inner)
    }

    /// Congruence `A^T S A`.
    pub fn congruence(&self, a: &Matrix) -> Result<SymmetricMatrix> {
        same_dim(self.dim(), a.nrows())?;
        SymmetricMatrix::new(a.transpose() * &self.inner * a)
    }

    /// Eigenvalues in increasing order with matching eigenvector columns.
    pub fn eigen(&self) -> (Vec<f64>, Matrix) {
        let eig = SymmetricEigen::new(self.inner.clone());
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let d = self.dim();
        let vectors = Matrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
        (values, vectors)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigen().0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().expect("non-empty")
    }
}

fn same_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// A symmetric positive-definite matrix with its cached eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveMatrix {
    sym: SymmetricMatrix,
    eigenvalues: Vec<f64>,
    eigenvectors: Matrix,
}

impl PositiveMatrix {
    pub fn new(sym: SymmetricMatrix) -> Result<Self> {
        let (eigenvalues, eigenvectors) = sym.eigen();
        let min = eigenvalues[0];
        let max = *eigenvalues.last().expect("non-empty");
        let threshold = POSITIVITY_THRESHOLD * max.abs();
        if !(max > 0.0 && min > threshold) {
            return Err(Error::NearSingular { min_eigenvalue: min, threshold });
        }
        Ok(PositiveMatrix { sym, eigenvalues, eigenvectors })
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        PositiveMatrix::new(SymmetricMatrix::new(m)?)
    }

    pub fn identity(dim: usize) -> Self {
        PositiveMatrix {
            sym: SymmetricMatrix::identity(dim),
            eigenvalues: vec![1.0; dim],
            eigenvectors: Matrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.sym.dim()
    }

    pub fn matrix(&self) -> &Matrix {
        self.sym.matrix()
    }

    pub fn symmetric(&self) -> &SymmetricMatrix {
        &self.sym
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty")
    }

    /// `P^t` through the spectral decomposition.
    pub fn power(&self, t: f64) -> Matrix {
        let v = &self.eigenvectors;
        let scaled = Matrix::from_fn(self.dim(), self.dim(), |r, c| v[(r, c)] * self.eigenvalues[c].powf(t));
        let m = scaled * v.transpose();
        (&m + m.transpose()) * 0.5
    }

    pub fn sqrt(&self) -> PositiveMatrix {
        self.spectral_map(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> PositiveMatrix {
        self.spectral_map(|x| 1.0 / x.sqrt())
    }

    pub fn inverse(&self) -> PositiveMatrix {
        self.spectral_map(|x| 1.0 / x)
    }

    pub fn log_det(&self) -> f64 {
        self.eigenvalues.iter().map(|x| x.ln()).sum()
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> PositiveMatrix {
        let eigenvalues: Vec<f64> = self.eigenvalues.iter().map(|&x| f(x)).collect();
        let v = &self.eigenvectors;
        let scaled = Matrix::from_fn(self.dim(), self.dim(), |r, c| v[(r, c)] * eigenvalues[c]);
        let m = scaled * v.transpose();
        let inner = (&m + m.transpose()) * 0.5;
        // f is monotone on the positive axis, so the eigenbasis and the
        // ordering (up to reversal) carry over.
        let mut pairs: Vec<(f64, usize)> = eigenvalues.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let eigenvectors = Matrix::from_fn(self.dim(), self.dim(), |r, c| v[(r, pairs[c].1)]);
        PositiveMatrix {
            sym: SymmetricMatrix { inner },
            eigenvalues: pairs.iter().map(|p| p.0).collect(),
            eigenvectors,
        }
    }
}

/// The unique positive square root.
pub fn psd_sqrt(p: &PositiveMatrix) -> PositiveMatrix {
    p.sqrt()
}

/// Outcome of a strict Loewner comparison `B < C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoewnerComparison {
    pub holds: bool,
    /// Smallest eigenvalue of `C - B`.
    pub margin: f64,
}

/// `B < C` iff `C - B` is positive definite.
pub fn loewner_less(b: &SymmetricMatrix, c: &SymmetricMatrix) -> Result<LoewnerComparison> {
    let diff = c.sub(b)?;
    let margin = diff.min_eigenvalue();
    Ok(LoewnerComparison { holds: margin > 0.0, margin })
}

/// Thin QR orthonormalization of the columns of `m`.
pub fn orthonormalize(m: &Matrix) -> Matrix {
    m.clone().qr().q()
}

/// Largest principal angle between the column spans of two matrices with
/// orthonormal columns and equal rank.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_dim(a.nrows(), b.nrows())?;
    same_dim(a.ncols(), b.ncols())?;
    if a.ncols() == 0 {
        return Ok(0.0);
    }
    let residual = a - b * (b.transpose() * a);
    let s = operator_norm(&residual)?;
    Ok(s.clamp(0.0, 1.0).asin())
}

/// Flip column signs so that the first entry of magnitude above `1e-10` in
/// each column is positive.
pub fn canonicalize_columns(m: &mut Matrix) {
    for mut col in m.column_iter_mut() {
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-10) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// The `k`-th compound matrix (matrix of `k x k` minors), which represents
/// the `k`-th exterior power in the basis of lexicographic index subsets.
pub fn compound(m: &Matrix, k: usize) -> Matrix {
    let sets = subsets(m.nrows(), k);
    let n = sets.len();
    Matrix::from_fn(n, n, |r, c| {
        let rows = &sets[r];
        let cols = &sets[c];
        Matrix::from_fn(k, k, |i, j| m[(rows[i], cols[j])]).determinant()
    })
}
