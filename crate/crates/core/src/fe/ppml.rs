use super::absorb::{Absorber, FeMethod, Term};
use super::absorbed_ols;
use super::wls::{cluster_robust_vcov, DesignMatrix, VcovResult};
use crate::error::{Error, Result};

pub const PPML_TOL: f64 = 1e-9;
pub const PPML_MAX_ITER: usize = 200;

#[derive(Debug, Clone)]
pub struct PpmlFit {
    pub names: Vec<String>,
    pub coefficients: Vec<Option<f64>>,
    pub vcov: VcovResult,
    /// Fitted means `μ_i`.
    pub mu: Vec<f64>,
    pub iterations: usize,
}

/// Poisson pseudo-maximum likelihood with absorbed fixed effects, fitted by
/// iteratively reweighted least squares. Each IRLS step is a weighted
/// two-way solve on the working response.
pub fn ppml_fit(counts: &[f64], absorbed: &[Term], x: &DesignMatrix, method: FeMethod) -> Result<PpmlFit> {
    let n = counts.len();
    if x.n_rows() != n {
        return Err(Error::invalid("regressors do not align with counts"));
    }
    if counts.iter().any(|&y| !y.is_finite() || y < 0.0) {
        return Err(Error::invalid("counts must be finite and nonnegative"));
    }
    for t in absorbed {
        let mut totals = vec![0.0; t.n_levels()];
        let mut present = vec![false; t.n_levels()];
        for (i, &l) in t.levels().iter().enumerate() {
            if x.weights[i] > 0.0 {
                totals[l as usize] += counts[i];
                present[l as usize] = true;
            }
        }
        if let Some(l) = (0..t.n_levels()).find(|&l| present[l] && totals[l] == 0.0) {
            return Err(Error::Separation(format!("{} level {l}", t.name())));
        }
    }

    let mean = counts.iter().sum::<f64>() / n as f64;
    let mut mu: Vec<f64> = counts.iter().map(|&y| 0.5 * (y + mean)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut beta: Vec<f64> = vec![f64::NAN; x.n_cols()];

    for iter in 1..=PPML_MAX_ITER {
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (counts[i] - mu[i]) / mu[i]).collect();
        let w: Vec<f64> = (0..n).map(|i| x.weights[i] * mu[i]).collect();
        let absorber = Absorber::new(absorbed.to_vec(), w.clone(), method)?;
        let xw = DesignMatrix { weights: w, ..x.clone() };
        let (fit, tilde, z_tilde) = absorbed_ols(&absorber, &xw, &z)?;
        let b: Vec<f64> = fit.coefficients.iter().map(|c| c.unwrap_or(0.0)).collect();
        // linear predictor = z minus the working residual
        let new_eta: Vec<f64> = (0..n)
            .map(|i| {
                let xb: f64 = tilde.columns.iter().zip(&b).map(|(c, b)| c[i] * b).sum();
                z[i] - (z_tilde[i] - xb)
            })
            .collect();
        let d_beta = b.iter().zip(&beta).map(|(a, c)| (a - c).abs()).fold(0.0, |m: f64, d| {
            if d.is_nan() {
                f64::INFINITY
            } else {
                m.max(d)
            }
        });
        let d_eta = new_eta.iter().zip(&eta).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        eta = new_eta;
        mu = eta.iter().map(|e| e.exp()).collect();
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::estimation("PPML diverged"));
        }
        beta = b;
        if (x.n_cols() == 0 || d_beta <= PPML_TOL) && d_eta <= 1e-7 {
            let w: Vec<f64> = (0..n).map(|i| x.weights[i] * mu[i]).collect();
            let absorber = Absorber::new(absorbed.to_vec(), w.clone(), method)?;
            let xw = DesignMatrix { weights: w, ..x.clone() };
            let (fit, tilde, _) = absorbed_ols(&absorber, &xw, &z)?;
            let kept = fit.kept();
            let resid: Vec<f64> = (0..n).map(|i| (counts[i] - mu[i]) / mu[i]).collect();
            let vcov = cluster_robust_vcov(&tilde.select(&kept), &resid)?;
            let coefficients = (0..x.n_cols()).map(|k| fit.coefficients[k].map(|_| beta[k])).collect();
            return Ok(PpmlFit { names: x.names.clone(), coefficients, vcov, mu, iterations: iter });
        }
    }
    Err(Error::NotConverged { what: "PPML".into(), iterations: PPML_MAX_ITER })
}
