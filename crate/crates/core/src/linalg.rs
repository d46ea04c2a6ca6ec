//! Dense symmetric solves with deterministic rank dropping.

use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::DVector;

/// Relative pivot threshold below which a column is treated as collinear
/// with the columns before it.
pub const RANK_TOL: f64 = 1e-9;

/// Cholesky factor of a positive semi-definite matrix, computed in column
/// order; a column whose pivot collapses relative to its own diagonal is
/// dropped, so the first of any set of collinear columns survives.
#[derive(Debug, Clone)]
pub struct SymFactor {
    n: usize,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    /// Lower-triangular factor on the kept columns (row-major, len k*k).
    l: Vec<f64>,
}

impl SymFactor {
    pub fn new(a: &DMatrix<f64>) -> Self {
        Self::with_tol(a, RANK_TOL)
    }

    pub fn with_tol(a: &DMatrix<f64>, tol: f64) -> Self {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let mut kept: Vec<usize> = Vec::with_capacity(n);
        let mut dropped = Vec::new();
        // rows of L for kept columns, stored densely in kept-order
        let mut l: Vec<f64> = Vec::with_capacity(n * n);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for j in 0..n {
            let k = kept.len();
            let mut row = vec![0.0; k + 1];
            for (p, &cp) in kept.iter().enumerate() {
                let mut s = a[(j, cp)];
                let rp = &rows[p];
                for q in 0..p {
                    s -= row[q] * rp[q];
                }
                row[p] = s / rp[p];
            }
            let d = a[(j, j)] - row[..k].iter().map(|x| x * x).sum::<f64>();
            let scale = a[(j, j)].abs();
            if scale <= 0.0 || d <= tol * scale {
                dropped.push(j);
                continue;
            }
            row[k] = d.sqrt();
            kept.push(j);
            rows.push(row);
        }
        let k = kept.len();
        l.resize(k * k, 0.0);
        for (i, r) in rows.iter().enumerate() {
            l[i * k..i * k + r.len()].copy_from_slice(r);
        }
        SymFactor { n, kept, dropped, l }
    }

    #[cfg(test)]
    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// Solve `A x = b` on the kept columns; dropped coordinates are zero.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let k = self.kept.len();
        let mut z: Vec<f64> = self.kept.iter().map(|&j| b[j]).collect();
        for i in 0..k {
            let mut s = z[i];
            for q in 0..i {
                s -= self.l[i * k + q] * z[q];
            }
            z[i] = s / self.l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = z[i];
            for q in i + 1..k {
                s -= self.l[q * k + i] * z[q];
            }
            z[i] = s / self.l[i * k + i];
        }
        let mut x = vec![0.0; self.n];
        for (p, &j) in self.kept.iter().enumerate() {
            x[j] = z[p];
        }
        x
    }

    /// Generalized inverse: inverse on the kept block, zeros elsewhere.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = DMatrix::zeros(self.n, self.n);
        let mut e = vec![0.0; self.n];
        for &j in &self.kept {
            e[j] = 1.0;
            let col = self.solve(&e);
            e[j] = 0.0;
            for i in 0..self.n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// `X' diag(w) X` for a column-major list of columns.
pub fn weighted_gram(cols: &[Vec<f64>], w: &[f64]) -> DMatrix<f64> {
    let k = cols.len();
    let mut g = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let s: f64 = cols[a].iter().zip(&cols[b]).zip(w).map(|((x, y), w)| w * x * y).sum();
            g[(a, b)] = s;
            g[(b, a)] = s;
        }
    }
    g
}

#[cfg(test)]
pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
