//! Numerical core: weighted least squares, fixed-effect absorption,
//! cluster-robust covariance, Poisson PML and 2SLS.

mod absorb;
mod ppml;
mod tsls;
mod twoway;
mod wls;

pub use absorb::{Absorber, FeMethod, Projection, RowKey, Term, DEMEAN_TOL, DENSE_MAX_COLUMNS, MAX_SWEEPS};
pub use ppml::{ppml_fit, PpmlFit, PPML_MAX_ITER, PPML_TOL};
pub use tsls::{tsls_fit, TslsFit};
pub use twoway::{fit_two_way_fe, FeCell, FeFit, FitReport, TwoWaySpec};
pub use wls::{cluster_robust_vcov, cluster_robust_vcov_dof, hc1_vcov, solve_wls, DesignMatrix, VcovResult, WlsFit};

use crate::error::Result;

/// Frisch–Waugh–Lovell: OLS of `y` on `x` after absorbing the fixed effects
/// in `absorber` (whose weights must match `x.weights`). Returns the fit on
/// the residualized data together with the residualized columns.
pub fn absorbed_ols(absorber: &Absorber, x: &DesignMatrix, y: &[f64]) -> Result<(WlsFit, DesignMatrix, Vec<f64>)> {
    let y_tilde = absorber.residualize(y)?;
    let cols = x.columns.iter().map(|c| absorber.residualize(c)).collect::<Result<Vec<_>>>()?;
    // columns that vanish after absorption carry no within variation
    let mut tilde = x.with_columns(x.names.clone(), cols)?;
    for (k, c) in tilde.columns.iter_mut().enumerate() {
        let raw: f64 = x.columns[k].iter().map(|v| v * v).sum();
        let within: f64 = c.iter().map(|v| v * v).sum();
        if within <= 1e-20 * raw.max(1.0) {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let fit = solve_wls(&tilde, &y_tilde)?;
    Ok((fit, tilde, y_tilde))
}
