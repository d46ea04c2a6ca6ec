use super::absorb::Absorber;
use super::absorbed_ols;
use super::wls::{cluster_robust_vcov, solve_wls, DesignMatrix};
use crate::error::{Error, Result};
use crate::linalg::SymFactor;

#[derive(Debug, Clone)]
pub struct TslsFit {
    pub estimate: f64,
    pub se: f64,
    /// Cluster-robust Wald statistic for excluding all instruments from the
    /// first stage, divided by the number of instruments.
    pub first_stage_f: f64,
    pub first_stage: Vec<Option<f64>>,
    pub instruments_used: Vec<String>,
    pub n_obs: usize,
    pub n_clusters: usize,
}

/// Just- or over-identified 2SLS for a single endogenous regressor after
/// absorbing the fixed effects in `absorber`.
pub fn tsls_fit(y: &[f64], endog: &[f64], instruments: &DesignMatrix, absorber: &Absorber) -> Result<TslsFit> {
    let n = y.len();
    if endog.len() != n || instruments.n_rows() != n || absorber.n_obs() != n {
        return Err(Error::invalid("2SLS inputs have inconsistent lengths"));
    }
    if instruments.n_cols() == 0 {
        return Err(Error::invalid("2SLS needs at least one instrument"));
    }
    let (first, z_tilde, x_tilde) = absorbed_ols(absorber, instruments, endog)?;
    let kept = first.kept();
    if kept.is_empty() {
        return Err(Error::estimation("instruments have no variation within the fixed effects"));
    }
    let pi: Vec<f64> = kept.iter().map(|&k| first.coefficients[k].unwrap()).collect();
    let zk = z_tilde.select(&kept);
    let x_hat: Vec<f64> = (0..n).map(|i| zk.columns.iter().zip(&pi).map(|(c, p)| c[i] * p).sum()).collect();
    let w = &instruments.weights;
    let xhat_ss: f64 = (0..n).map(|i| w[i] * x_hat[i] * x_hat[i]).sum();
    let xx_raw: f64 = (0..n).map(|i| w[i] * x_tilde[i] * x_tilde[i]).sum();
    if xhat_ss <= 1e-12 * xx_raw.max(1e-300) {
        return Err(Error::estimation("first stage has no explanatory power (rank failure)"));
    }
    let y_tilde = absorber.residualize(y)?;
    let num: f64 = (0..n).map(|i| w[i] * x_hat[i] * y_tilde[i]).sum();
    let den: f64 = (0..n).map(|i| w[i] * x_hat[i] * x_tilde[i]).sum();
    let estimate = num / den;

    let u: Vec<f64> = (0..n).map(|i| y_tilde[i] - estimate * x_tilde[i]).collect();
    let second = instruments.with_columns(vec!["endog".into()], vec![x_hat])?;
    let vc = cluster_robust_vcov(&second, &u)?;
    // correct the bread from x̂'x̂ to x̂'x̃ (identical in exact arithmetic)
    let se = vc.se(0) * (xhat_ss / den).abs();

    let first_resid = solve_wls(&zk, &x_tilde)?.residuals;
    let vpi = cluster_robust_vcov(&zk, &first_resid)?;
    let noise = (0..pi.len()).map(|k| vpi.matrix[(k, k)]).fold(0.0, f64::max);
    let wald = if noise <= 1e-300 {
        f64::INFINITY
    } else {
        let inv = SymFactor::new(&vpi.matrix).inverse();
        let mut wald = 0.0;
        for a in 0..pi.len() {
            for b in 0..pi.len() {
                wald += pi[a] * inv[(a, b)] * pi[b];
            }
        }
        wald
    };
    Ok(TslsFit {
        estimate,
        se,
        first_stage_f: wald / pi.len() as f64,
        first_stage: first.coefficients.clone(),
        instruments_used: zk.names.clone(),
        n_obs: n,
        n_clusters: vc.n_clusters,
    })
}
