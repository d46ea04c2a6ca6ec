use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{weighted_gram, SymFactor};

/// Named regressors stored by column, with a cluster id and a weight per row.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
    pub weights: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, clusters: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let n = clusters.len();
        if names.len() != columns.len() {
            return Err(Error::invalid("column names do not match columns"));
        }
        if weights.len() != n || columns.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("design matrix columns have inconsistent lengths"));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite entry in design matrix"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        Ok(DesignMatrix { names, columns, clusters, weights })
    }

    /// Unit weights, one cluster per row.
    pub fn unweighted(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        Self::new(names, columns, (0..n).collect(), vec![1.0; n])
    }

    pub fn n_rows(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn with_columns(&self, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(names, columns, self.clusters.clone(), self.weights.clone())
    }

    pub fn select(&self, keep: &[usize]) -> DesignMatrix {
        DesignMatrix {
            names: keep.iter().map(|&k| self.names[k].clone()).collect(),
            columns: keep.iter().map(|&k| self.columns[k].clone()).collect(),
            clusters: self.clusters.clone(),
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WlsFit {
    /// Coefficient per column; `None` for columns dropped as collinear.
    pub coefficients: Vec<Option<f64>>,
    pub dropped: Vec<String>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl WlsFit {
    pub fn kept(&self) -> Vec<usize> {
        (0..self.coefficients.len()).filter(|&k| self.coefficients[k].is_some()).collect()
    }
}

/// Weighted least squares; collinear columns are dropped in order, keeping
/// the first listed.
pub fn solve_wls(x: &DesignMatrix, y: &[f64]) -> Result<WlsFit> {
    if y.len() != x.n_rows() {
        return Err(Error::invalid("response length does not match design"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite response"));
    }
    if !x.weights.iter().any(|&w| w > 0.0) {
        return Err(Error::invalid("all weights are zero"));
    }
    let gram = weighted_gram(&x.columns, &x.weights);
    let f = SymFactor::new(&gram);
    let xty: Vec<f64> =
        x.columns.iter().map(|c| c.iter().zip(y).zip(&x.weights).map(|((a, b), w)| w * a * b).sum()).collect();
    let b = f.solve(&xty);
    let fitted: Vec<f64> = (0..x.n_rows()).map(|i| x.columns.iter().zip(&b).map(|(c, b)| c[i] * b).sum()).collect();
    let residuals = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let kept: std::collections::BTreeSet<usize> = f.kept().iter().copied().collect();
    Ok(WlsFit {
        coefficients: (0..x.n_cols()).map(|k| kept.contains(&k).then_some(b[k])).collect(),
        dropped: f.dropped().iter().map(|&k| x.names[k].clone()).collect(),
        fitted,
        residuals,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VcovResult {
    pub names: Vec<String>,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub n_clusters: usize,
    pub small_sample_factor: f64,
}

impl VcovResult {
    pub fn se(&self, k: usize) -> f64 {
        self.matrix[(k, k)].max(0.0).sqrt()
    }

    pub fn ses(&self) -> Vec<f64> {
        (0..self.names.len()).map(|k| self.se(k)).collect()
    }
}

/// Cluster-robust sandwich `(X'WX)⁻¹ (Σ_c s_c s_c') (X'WX)⁻¹` with scores
/// `s_c = Σ_{i∈c} w_i x_i u_i`, scaled by `G/(G−1)·(N−1)/(N−K)`.
pub fn cluster_robust_vcov(x: &DesignMatrix, residuals: &[f64]) -> Result<VcovResult> {
    cluster_robust_vcov_dof(x, residuals, x.n_cols())
}

/// As [`cluster_robust_vcov`], with an explicit parameter count `K` for the
/// small-sample factor.
pub fn cluster_robust_vcov_dof(x: &DesignMatrix, residuals: &[f64], k_dof: usize) -> Result<VcovResult> {
    if residuals.len() != x.n_rows() {
        return Err(Error::invalid("residuals do not align with design rows"));
    }
    let active: Vec<usize> = (0..x.n_rows()).filter(|&i| x.weights[i] > 0.0).collect();
    let n = active.len();
    let mut cluster_ids: Vec<usize> = active.iter().map(|&i| x.clusters[i]).collect();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let g = cluster_ids.len();
    if g < 2 {
        return Err(Error::estimation("cluster-robust variance needs at least two clusters"));
    }
    if k_dof >= n {
        return Err(Error::estimation(format!("K = {k_dof} parameters with only N = {n} observations")));
    }
    let k = x.n_cols();
    let bread = SymFactor::new(&weighted_gram(&x.columns, &x.weights)).inverse();
    let mut scores = DMatrix::<f64>::zeros(g, k);
    for &i in &active {
        let c = cluster_ids.binary_search(&x.clusters[i]).unwrap();
        let wu = x.weights[i] * residuals[i];
        for j in 0..k {
            scores[(c, j)] += wu * x.columns[j][i];
        }
    }
    let meat = scores.transpose() * &scores;
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k_dof as f64));
    let mut v = &bread * meat * &bread * factor;
    // symmetrize
    let vt = v.transpose();
    v = (v + vt) * 0.5;
    Ok(VcovResult { names: x.names.clone(), matrix: v, n_clusters: g, small_sample_factor: factor })
}

/// Heteroskedasticity-robust (HC1) covariance: every row its own cluster.
pub fn hc1_vcov(x: &DesignMatrix, residuals: &[f64]) -> Result<VcovResult> {
    let own = DesignMatrix { clusters: (0..x.n_rows()).collect(), ..x.clone() };
    cluster_robust_vcov(&own, residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_fit() {
        let x = DesignMatrix::unweighted(vec!["x".into()], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let f = solve_wls(&x, &[1.0, 2.0, 3.0]).unwrap();
        assert!((f.coefficients[0].unwrap() - 1.0).abs() < 1e-14);
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-14));
    }

    #[test]
    fn duplicate_column_dropped() {
        let c = vec![1.0, 2.0, 4.0, 3.0];
        let x = DesignMatrix::unweighted(vec!["a".into(), "b".into()], vec![c.clone(), c]).unwrap();
        let f = solve_wls(&x, &[1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!(f.coefficients[0].is_some());
        assert_eq!(f.coefficients[1], None);
        assert_eq!(f.dropped, vec!["b".to_string()]);
    }

    #[test]
    fn matches_explicit_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..20).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..20).map(|_| 0.2 + rng.random::<f64>()).collect();
        let x = DesignMatrix::new(vec!["a".into(), "b".into(), "c".into()], cols.clone(), (0..20).collect(), w.clone())
            .unwrap();
        let fit = solve_wls(&x, &y).unwrap();

        let xm = DMatrix::from_fn(20, 3, |i, j| cols[j][i]);
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
        let oracle = (xm.transpose() * &wm * &xm).try_inverse().unwrap() * xm.transpose() * &wm * DVector::from_vec(y);
        for j in 0..3 {
            assert!((fit.coefficients[j].unwrap() - oracle[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn fitted_values_invariant_to_weight_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cols: Vec<Vec<f64>> = (0..2).map(|_| (0..15).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..15).map(|_| 0.5 + rng.random::<f64>()).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let a = solve_wls(&DesignMatrix::new(names.clone(), cols.clone(), (0..15).collect(), w.clone()).unwrap(), &y)
            .unwrap();
        let w7: Vec<f64> = w.iter().map(|v| v * 7.3).collect();
        let b = solve_wls(&DesignMatrix::new(names, cols, (0..15).collect(), w7).unwrap(), &y).unwrap();
        for (p, q) in a.fitted.iter().zip(&b.fitted) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn vcov_edge_cases() {
        let x = DesignMatrix::new(vec!["x".into()], vec![vec![1.0, 2.0, 3.0, 4.0]], vec![0, 0, 1, 1], vec![1.0; 4])
            .unwrap();
        let v = cluster_robust_vcov(&x, &[0.0; 4]).unwrap();
        assert_eq!(v.matrix[(0, 0)], 0.0);
        // two clusters, K = 1: factor 2 * (N-1)/(N-1)
        let v = cluster_robust_vcov(&x, &[0.1, -0.2, 0.3, 0.05]).unwrap();
        assert!((v.small_sample_factor - 2.0).abs() < 1e-15);
        assert!(v.matrix[(0, 0)].is_finite());
        let one = DesignMatrix { clusters: vec![0; 4], ..x.clone() };
        assert!(cluster_robust_vcov(&one, &[0.1; 4]).is_err());
    }

    #[test]
    fn own_clusters_equal_hc1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let cols: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = DesignMatrix::unweighted(vec!["a".into(), "b".into()], cols.clone()).unwrap();
        let v = cluster_robust_vcov(&x, &u).unwrap();
        // explicit HC1
        let xm = DMatrix::from_fn(n, 2, |i, j| cols[j][i]);
        let bread = (xm.transpose() * &xm).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..n {
            let xi = xm.row(i).transpose();
            meat += &xi * xi.transpose() * u[i] * u[i];
        }
        let hc1 = &bread * meat * &bread * (n as f64 / (n as f64 - 2.0));
        assert!((v.matrix - hc1).abs().max() < 1e-12);
    }
}
