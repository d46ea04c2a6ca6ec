use serde::Serialize;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostProjection {
    pub effect_pct: f64,
    pub baseline_monthly_accidents: f64,
    pub cost_per_accident: f64,
    pub monthly_cost: f64,
    pub annual_cost: f64,
}

/// Extra cost implied by a percentage increase in monthly accidents.
/// A zero effect is allowed and costs nothing; negative or non-finite
/// inputs and a non-positive baseline or unit cost are rejected.
pub fn cost_projection(effect_pct: f64, baseline: f64, cost: f64) -> CliResult<CostProjection> {
    if !(effect_pct.is_finite() && effect_pct >= 0.0) {
        return Err(CliError::Usage(format!("effect percentage must be a nonnegative number, got {effect_pct}")));
    }
    for (name, v) in [("baseline monthly accidents", baseline), ("cost per accident", cost)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::Usage(format!("{name} must be positive, got {v}")));
        }
    }
    let monthly = effect_pct / 100.0 * baseline * cost;
    Ok(CostProjection {
        effect_pct,
        baseline_monthly_accidents: baseline,
        cost_per_accident: cost,
        monthly_cost: monthly,
        annual_cost: 12.0 * monthly,
    })
}
