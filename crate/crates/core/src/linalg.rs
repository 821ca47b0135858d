//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Upper-triangle accumulator for `X' W X` with a row-major design.
pub(crate) struct Gram {
    k: usize,
    upper: Vec<f64>,
}

impl Gram {
    pub fn new(k: usize) -> Self {
        Gram {
            k,
            upper: vec![0.0; k * k],
        }
    }

    #[inline]
    pub fn add(&mut self, row: &[f64], w: f64) {
        let k = self.k;
        for a in 0..k {
            let ra = row[a] * w;
            if ra == 0.0 {
                continue;
            }
            let base = a * k;
            for b in a..k {
                self.upper[base + b] += ra * row[b];
            }
        }
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.upper[a * k + b]
        })
    }
}

pub(crate) fn add_ridge(m: &mut DMatrix<f64>, lambda: f64) {
    for i in 0..m.nrows() {
        m[(i, i)] += lambda;
    }
}

pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub(crate) fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let inv = chol.inverse();
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Columns that are (numerically) linear combinations of earlier columns,
/// found by an unpivoted Cholesky sweep over the cross-product matrix.
pub(crate) fn collinear_columns(xtx: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let k = xtx.nrows();
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut dropped = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..k {
        let mut d = xtx[(j, j)];
        for &c in &kept {
            d -= l[(j, c)] * l[(j, c)];
        }
        if xtx[(j, j)] <= 0.0 || d <= rel_tol * xtx[(j, j)] {
            dropped.push(j);
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..k {
            let mut s = xtx[(i, j)];
            for &c in &kept {
                s -= l[(i, c)] * l[(j, c)];
            }
            l[(i, j)] = s / djj;
        }
        kept.push(j);
    }
    dropped
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_duplicate_column() {
        // [TRIVIAL]
        let x = DMatrix::from_row_slice(4, 3, &[1., 0., 0., 1., 1., 1., 1., 2., 2., 1., 3., 3.]);
        let xtx = x.transpose() * &x;
        assert_eq!(collinear_columns(&xtx, 1e-10), vec![2]);
    }

    #[test]
    fn gram_matches_dense_product() {
        // [DERIVED] dense product
        let rows = [[1.0, 2.0, -1.0], [0.5, 0.0, 3.0], [1.0, 1.0, 1.0]];
        let w = [1.0, 2.0, 0.5];
        let mut g = Gram::new(3);
        for (r, &wi) in rows.iter().zip(&w) {
            g.add(r, wi);
        }
        let m = g.into_matrix();
        let x = DMatrix::from_row_slice(3, 3, &rows.concat());
        let wm = DMatrix::from_diagonal(&DVector::from_row_slice(&w));
        let dense = x.transpose() * wm * &x;
        assert!((m - dense).abs().max() < 1e-12);
    }
}
