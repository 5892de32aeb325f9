// SPDX-License-Identifier: Apache-2.0

//! Small dense linear-algebra helpers shared by the prox, geometry and prior
//! modules. Matrices travel through the solver as column-major vectors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Thin SVD with singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> Result<SortedSvd> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SVD input contains non-finite entries".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not produce V^T".into()))?;
    let sv = svd.singular_values;
    let k = sv.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut u_sorted = DMatrix::zeros(u.nrows(), k);
    let mut v_sorted = DMatrix::zeros(v_t.ncols(), k);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v_t.row(src).transpose());
        s_sorted[dst] = sv[src];
    }
    Ok(SortedSvd {
        u: u_sorted,
        singular_values: s_sorted,
        v: v_sorted,
    })
}

/// Singular values only, in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(sv)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().sum()
}

pub fn to_matrix(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn to_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Builds a matrix from row-major nested vectors.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::InvalidArgument("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        let svd = sorted_svd(&m).unwrap();
        assert_eq!(svd.singular_values.as_slice(), &[5.0, 1.0]);
        let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * svd.v.transpose();
        assert!((rebuilt - m).norm() < 1e-12);
    }

    #[test]
    fn column_major_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(to_matrix(&to_vector(&m), 2, 3), m);
        assert_eq!(matrix_from_rows(&matrix_to_rows(&m)).unwrap(), m);
    }
}
