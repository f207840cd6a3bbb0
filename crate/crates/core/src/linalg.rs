//! Thin SVD on nalgebra matrices, computed by faer.
//!
//! nalgebra's own SVD loses accuracy badly on exactly rank-deficient inputs
//! (for example a rank-one 168×7 matrix reconstructs with tens of percent
//! error), which is the common case for low-rank iterates.

use faer::Mat;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `m = u * diag(singular_values) * v^T` with `k = min(rows, cols)` factors,
/// singular values in nonincreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: DMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v: DMatrix::zeros(cols, 0),
        });
    }
    let dec = to_faer(m)
        .thin_svd()
        .map_err(|e| Error::Internal(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    Ok(Svd {
        u: DMatrix::from_fn(rows, k, |i, j| u[(i, j)]),
        singular_values: (0..k).map(|j| s[j]).collect(),
        v: DMatrix::from_fn(cols, k, |i, j| v[(i, j)]),
    })
}

/// Singular values in nonincreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows().min(m.ncols()) == 0 {
        return Ok(Vec::new());
    }
    to_faer(m)
        .singular_values()
        .map_err(|e| Error::Internal(format!("SVD did not converge: {e:?}")))
}
