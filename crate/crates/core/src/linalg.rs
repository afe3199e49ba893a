//! Dense symmetric eigensolver and small linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix::SymmetricMatrix;

/// Eigenvalues in ascending order with matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations. Stops once every off-diagonal magnitude is below
/// `1e-12 * ||A||_F`.
pub fn jacobi_eigen(m: &SymmetricMatrix) -> SymmetricEigen {
    jacobi_eigen_dense(m.to_dense())
}

pub fn jacobi_eigen_dense(mut a: DMatrix<f64>) -> SymmetricEigen {
    let n = a.nrows();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = 1e-12 * a.norm();

    for _ in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                max_off = max_off.max(a[(p, q)].abs());
            }
        }
        if max_off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[(r, p)];
                        let arq = a[(r, q)];
                        let nrp = c * arp - s * arq;
                        let nrq = s * arp + c * arq;
                        a[(r, p)] = nrp;
                        a[(p, r)] = nrp;
                        a[(r, q)] = nrq;
                        a[(q, r)] = nrq;
                    }
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    SymmetricEigen { values, vectors }
}

pub fn min_eigenvalue(m: &SymmetricMatrix) -> f64 {
    jacobi_eigen(m).values[0]
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite)
}

/// Solves `m x = b` for symmetric positive definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.solve(b))
        .ok_or(Error::NotPositiveDefinite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::MatrixKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn matches_reference_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 3, 7, 20, 41] {
            let a = random_symmetric(n, &mut rng);
            let ours = jacobi_eigen_dense(a.clone());
            let mut reference: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            reference.sort_by(f64::total_cmp);
            for (x, y) in ours.values.iter().zip(&reference) {
                assert!((x - y).abs() < 1e-10, "n={n}: {x} vs {y}");
            }
            // A V = V diag(values)
            let lambda = DMatrix::from_diagonal(&DVector::from_vec(ours.values.clone()));
            let resid = &a * &ours.vectors - &ours.vectors * lambda;
            assert!(resid.norm() < 1e-9);
            let ortho = ours.vectors.transpose() * &ours.vectors - DMatrix::identity(n, n);
            assert!(ortho.norm() < 1e-10);
        }
    }

    #[test]
    fn identity_and_diagonal() {
        let i = SymmetricMatrix::identity(5, MatrixKind::Correlation);
        assert_eq!(min_eigenvalue(&i), 1.0);
        let d = SymmetricMatrix::from_fn(3, MatrixKind::Covariance, |i, j| {
            if i == j {
                [3.0, -2.0, 5.0][i]
            } else {
                0.0
            }
        });
        assert_eq!(jacobi_eigen(&d).values, vec![-2.0, 3.0, 5.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        let r = 0.6;
        let g = SymmetricMatrix::from_fn(2, MatrixKind::Correlation, |i, j| if i == j { 1.0 } else { r });
        let e = jacobi_eigen(&g);
        assert!((e.values[0] - 0.4).abs() < 1e-14);
        assert!((e.values[1] - 1.6).abs() < 1e-14);
    }
}
