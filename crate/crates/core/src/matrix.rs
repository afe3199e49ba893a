//! Dense symmetric storage and strict half-vectorization.
//!
//! Off-diagonal pairs are indexed column by column below the diagonal:
//! `(1,0), (2,0), ..., (N-1,0), (2,1), ..., (N-1,N-2)` in zero-based terms.
//! Every p-value, mask and resampled statistic in the crate uses this order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Correlation,
    Covariance,
}

/// Number of strictly-lower pairs for an `n x n` matrix.
pub const fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Recovers `N` from `M = N(N-1)/2`.
pub fn dim_from_pairs(m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::Shape { len: m });
    }
    let n = ((1.0 + (1.0 + 8.0 * m as f64).sqrt()) / 2.0).round() as usize;
    if pair_count(n) != m {
        return Err(Error::Shape { len: m });
    }
    Ok(n)
}

/// Position of pair `(i, j)`, `i > j`, in the half-vector of an `n x n` matrix.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i > j && i < n);
    j * n - j * (j + 1) / 2 + (i - j - 1)
}

/// Iterates `(i, j)` pairs with `i > j` in half-vectorization order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |j| (j + 1..n).map(move |i| (i, j)))
}

/// Symmetric matrix with one physical entry per unordered index pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    kind: MatrixKind,
    // lower triangle including the diagonal, row-major: (i, j) with i >= j
    packed: Vec<f64>,
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
    hi * (hi + 1) / 2 + lo
}

impl SymmetricMatrix {
    pub fn identity(dim: usize, kind: MatrixKind) -> Self {
        Self::from_fn(dim, kind, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Builds the matrix from `f(i, j)` evaluated for `i >= j` only.
    pub fn from_fn(dim: usize, kind: MatrixKind, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut packed = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                packed.push(f(i, j));
            }
        }
        Self { dim, kind, packed }
    }

    /// Takes the lower triangle of a square matrix. The upper triangle is ignored.
    pub fn from_lower(m: &DMatrix<f64>, kind: MatrixKind) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let out = Self::from_fn(m.nrows(), kind, |i, j| m[(i, j)]);
        out.validate()?;
        Ok(out)
    }

    /// Unit-diagonal matrix with the given off-diagonal half-vector.
    pub fn correlation_from_offdiag(values: &HalfVec) -> Result<Self> {
        let n = values.dim();
        let mut out = Self::identity(n, MatrixKind::Correlation);
        for ((i, j), &v) in pairs(n).zip(values.as_slice()) {
            out.packed[packed_index(i, j)] = v;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.dim {
            for j in 0..=i {
                let v = self.get(i, j);
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("non-finite entry at ({i}, {j})")));
                }
                match self.kind {
                    MatrixKind::Correlation if i == j && v != 1.0 => {
                        return Err(Error::InvalidInput(format!(
                            "correlation diagonal ({i}, {i}) is {v}, expected 1"
                        )));
                    }
                    MatrixKind::Correlation if !(-1.0..=1.0).contains(&v) => {
                        return Err(Error::InvalidInput(format!(
                            "correlation ({i}, {j}) = {v} outside [-1, 1]"
                        )));
                    }
                    MatrixKind::Covariance if i == j && v < 0.0 => {
                        return Err(Error::InvalidInput(format!(
                            "negative variance {v} at ({i}, {i})"
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.packed[packed_index(i, j)]
    }

    /// Sets entry `(i, j)` and its mirror. Invariants are not rechecked.
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.packed[packed_index(i, j)] = v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// Strict half-vectorization.
    pub fn vechs(&self) -> HalfVec {
        HalfVec {
            dim: self.dim,
            values: pairs(self.dim).map(|(i, j)| self.get(i, j)).collect(),
        }
    }

    /// `xi * I + (1 - xi) * self`; zeros off the diagonal stay exactly zero.
    pub fn shrink_toward_identity(&self, xi: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim {
            for j in 0..=i {
                let v = self.get(i, j);
                let shrunk = if i == j {
                    xi + (1.0 - xi) * v
                } else {
                    (1.0 - xi) * v
                };
                out.set(i, j, shrunk);
            }
        }
        if self.kind == MatrixKind::Correlation {
            for i in 0..self.dim {
                out.set(i, i, 1.0);
            }
        }
        out
    }
}

/// Strict half-vectorization of an `N x N` matrix, length `N(N-1)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfVec {
    dim: usize,
    values: Vec<f64>,
}

impl HalfVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let dim = dim_from_pairs(values.len())?;
        Ok(Self { dim, values })
    }

    /// Matrix dimension `N`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn abs(&self) -> HalfVec {
        HalfVec {
            dim: self.dim,
            values: self.values.iter().map(|v| v.abs()).collect(),
        }
    }

    /// Inverse of [`SymmetricMatrix::vechs`] for unit-diagonal matrices.
    pub fn fill(&self) -> Result<SymmetricMatrix> {
        SymmetricMatrix::correlation_from_offdiag(self)
    }
}
