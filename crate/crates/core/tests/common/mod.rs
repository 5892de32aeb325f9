// SPDX-License-Identifier: Apache-2.0

//! Brute-force oracles shared by the integration tests. None of them reuse
//! library code paths.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Minimizes a convex scalar function on `[lo, hi]` by golden-section search.
pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// Minimizes a convex function of two variables on a box by nested
/// golden-section search.
pub fn golden_min_2d(f: impl Fn(f64, f64) -> f64, lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    let inner = |a: f64| {
        let b = golden_min(|b| f(a, b), lo[1], hi[1]);
        (b, f(a, b))
    };
    let a = golden_min(|a| inner(a).1, lo[0], hi[0]);
    [a, inner(a).0]
}

/// Solves `min c^T z  s.t.  M z = b, z >= 0` with a dense two-phase tableau
/// simplex (Bland's rule). Returns `None` when infeasible or unbounded.
pub fn simplex(m: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> Option<DVector<f64>> {
    let rows = m.nrows();
    let cols = m.ncols();
    let eps = 1e-10;
    // Tableau columns: original, artificial, rhs.
    let width = cols + rows + 1;
    let mut t = DMatrix::<f64>::zeros(rows + 1, width);
    let mut basis = vec![0usize; rows];
    for i in 0..rows {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..cols {
            t[(i, j)] = sign * m[(i, j)];
        }
        t[(i, cols + i)] = 1.0;
        t[(i, width - 1)] = sign * b[i];
        basis[i] = cols + i;
    }

    let pivot = |t: &mut DMatrix<f64>, basis: &mut Vec<usize>, r: usize, col: usize| {
        let p = t[(r, col)];
        for j in 0..width {
            t[(r, j)] /= p;
        }
        for i in 0..t.nrows() {
            if i != r {
                let f = t[(i, col)];
                if f != 0.0 {
                    for j in 0..width {
                        let v = t[(r, j)];
                        t[(i, j)] -= f * v;
                    }
                }
            }
        }
        basis[r] = col;
    };

    let run = |t: &mut DMatrix<f64>, basis: &mut Vec<usize>, allowed: usize| -> bool {
        for _ in 0..10_000 {
            let entering = (0..allowed).find(|&j| t[(rows, j)] < -eps);
            let Some(col) = entering else { return true };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..rows {
                if t[(i, col)] > eps {
                    let ratio = t[(i, width - 1)] / t[(i, col)];
                    let better = match best {
                        None => true,
                        Some((bi, br)) => ratio < br - eps || (ratio <= br + eps && basis[i] < basis[bi]),
                    };
                    if better {
                        best = Some((i, ratio));
                    }
                }
            }
            match best {
                Some((r, _)) => pivot(t, basis, r, col),
                None => return false,
            }
        }
        false
    };

    // Phase 1: minimize the sum of artificials.
    for j in 0..width {
        let s: f64 = (0..rows).map(|i| t[(i, j)]).sum();
        t[(rows, j)] = if j >= cols && j < cols + rows { 0.0 } else { -s };
    }
    if !run(&mut t, &mut basis, cols + rows) || t[(rows, width - 1)].abs() > 1e-8 {
        return None;
    }
    // Drive remaining artificials out of the basis where possible.
    for r in 0..rows {
        if basis[r] >= cols {
            if let Some(col) = (0..cols).find(|&j| t[(r, j)].abs() > eps) {
                pivot(&mut t, &mut basis, r, col);
            }
        }
    }
    // Phase 2.
    for j in 0..width {
        t[(rows, j)] = 0.0;
    }
    for j in 0..cols {
        t[(rows, j)] = c[j];
    }
    for r in 0..rows {
        let bcol = basis[r];
        if bcol < cols {
            let f = t[(rows, bcol)];
            if f != 0.0 {
                for j in 0..width {
                    let v = t[(r, j)];
                    t[(rows, j)] -= f * v;
                }
            }
        }
    }
    if !run(&mut t, &mut basis, cols) {
        return None;
    }
    let mut z = DVector::zeros(cols);
    for r in 0..rows {
        if basis[r] < cols {
            z[basis[r]] = t[(r, width - 1)];
        }
    }
    Some(z)
}

/// Basis pursuit `min ||x||_1 s.t. A x = y` through the split `x = p - q`.
pub fn basis_pursuit_lp(a: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    let mut big = DMatrix::zeros(m, 2 * n);
    big.view_mut((0, 0), (m, n)).copy_from(a);
    big.view_mut((0, n), (m, n)).copy_from(&(-a));
    let z = simplex(&big, y, &DVector::from_element(2 * n, 1.0))?;
    Some(z.rows(0, n) - z.rows(n, n))
}

/// Singular values by the eigenvalues of `M^T M`, independent of the SVD
/// routine used by the library.
pub fn gram_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let g = m.transpose() * m;
    let mut ev: Vec<f64> = g.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}
