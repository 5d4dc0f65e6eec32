//! Dense symmetric solves backed by nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn matrix(h: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, h)
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// Solves `(H + damping I) x = rhs` by Cholesky; fails with the smallest
/// eigenvalue when the damped matrix is not positive definite.
pub(crate) fn solve_damped(h: &[f64], d: usize, damping: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let mut m = matrix(h, d);
    for i in 0..d {
        m[(i, i)] += damping;
    }
    let b = DVector::from_column_slice(rhs);
    match m.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&b).iter().copied().collect()),
        None => Err(Error::Conditioning {
            min_eigenvalue: min_eigenvalue(&m),
        }),
    }
}

/// `(H + damping I) x`.
pub(crate) fn damped_matvec(h: &[f64], d: usize, damping: f64, x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| {
            h[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + damping * x[i]
        })
        .collect()
}
