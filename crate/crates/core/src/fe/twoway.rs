//! Unit + period fixed effects, optionally with group-specific period
//! effects and unit-specific linear trends.

use serde::Serialize;

use super::absorb::{Absorber, FeMethod, RowKey, Term};
use crate::error::{Error, Result};

/// One observation entering a two-way fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeCell {
    pub unit: usize,
    pub period: usize,
    pub y: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TwoWaySpec {
    pub n_units: usize,
    pub n_periods: usize,
    /// Group per unit (0 = below, 1 = above); period effects become group-specific.
    pub groups: Option<Vec<usize>>,
    pub unit_trends: bool,
    pub method: FeMethod,
}

/// Estimated effects under the normalization: per group, the first estimable
/// period effect is zero; with unit trends the last estimable period effect
/// per group is zero as well, and slopes multiply `t − trend_center`.
#[derive(Debug, Clone)]
pub struct FeFit {
    pub alpha: Vec<Option<f64>>,
    /// Period effects of group 0 (`β_t`, or `β_t^h` with groups).
    pub beta: Vec<Option<f64>>,
    /// Above-minus-below period effects (`β_t^{h-l}`) when groups are used.
    pub group_beta: Option<Vec<Option<f64>>>,
    pub unit_trend: Option<Vec<Option<f64>>>,
    pub trend_center: f64,
    /// Residuals aligned with the input cells.
    pub residuals: Vec<f64>,
    pub normalization: String,
    pub iterations: usize,
    pub converged: bool,
    pub method: FeMethod,
    period_effects: Vec<Vec<Option<f64>>>,
    unit_group: Vec<usize>,
    n_periods: usize,
    absorber: Absorber,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub method: FeMethod,
    pub iterations: usize,
    pub converged: bool,
    pub absorbed_columns: usize,
    pub n_obs: usize,
    pub normalization: String,
}

impl FeFit {
    pub fn group_of(&self, unit: usize) -> usize {
        self.unit_group[unit]
    }

    pub fn period_effect(&self, unit: usize, period: usize) -> Option<f64> {
        self.period_effects[self.unit_group[unit]][period]
    }

    /// Whether the fitted value at `(unit, period)` is identified.
    pub fn is_estimable(&self, unit: usize, period: usize) -> bool {
        self.alpha[unit].is_some()
            && self.period_effect(unit, period).is_some()
            && self.unit_trend.as_ref().is_none_or(|s| s[unit].is_some())
    }

    pub fn predict(&self, unit: usize, period: usize) -> Option<f64> {
        if !self.is_estimable(unit, period) {
            return None;
        }
        let trend = self.unit_trend.as_ref().map_or(0.0, |s| s[unit].unwrap() * (period as f64 - self.trend_center));
        Some(self.alpha[unit]? + trend + self.period_effect(unit, period)?)
    }

    /// Position of `(unit, period)` in the absorbed structure.
    pub fn row_key(&self, unit: usize, period: usize) -> RowKey {
        let g = self.unit_group[unit];
        RowKey { levels: vec![unit as u32, (g * self.n_periods + period) as u32], time: period as f64 }
    }

    pub fn absorber(&self) -> &Absorber {
        &self.absorber
    }

    pub fn report(&self) -> FitReport {
        FitReport {
            method: self.method,
            iterations: self.iterations,
            converged: self.converged,
            absorbed_columns: self.absorber.n_columns(),
            n_obs: self.residuals.len(),
            normalization: self.normalization.clone(),
        }
    }
}

/// Build the absorbed terms shared by fits and auxiliary regressions.
pub(crate) fn two_way_terms(
    cells: &[FeCell],
    spec: &TwoWaySpec,
    unit_group: &[usize],
    n_groups: usize,
) -> (Vec<Term>, f64) {
    let units: Vec<u32> = cells.iter().map(|c| c.unit as u32).collect();
    let periods: Vec<u32> = cells.iter().map(|c| (unit_group[c.unit] * spec.n_periods + c.period) as u32).collect();
    let wsum: f64 = cells.iter().map(|c| c.weight).sum();
    let center = if wsum > 0.0 { cells.iter().map(|c| c.weight * c.period as f64).sum::<f64>() / wsum } else { 0.0 };
    let unit_term = if spec.unit_trends {
        Term::Trend {
            name: "unit".into(),
            levels: units,
            n_levels: spec.n_units,
            time: cells.iter().map(|c| c.period as f64).collect(),
            center,
        }
    } else {
        Term::factor("unit", units, spec.n_units)
    };
    (vec![unit_term, Term::factor("period", periods, n_groups * spec.n_periods)], center)
}

pub fn fit_two_way_fe(cells: &[FeCell], spec: &TwoWaySpec) -> Result<FeFit> {
    if cells.is_empty() {
        return Err(Error::invalid("empty estimation sample"));
    }
    for c in cells {
        if c.unit >= spec.n_units || c.period >= spec.n_periods {
            return Err(Error::invalid("cell index outside the declared panel"));
        }
        if !c.y.is_finite() {
            return Err(Error::invalid("non-finite outcome"));
        }
    }
    let unit_group: Vec<usize> = match &spec.groups {
        Some(g) if g.len() == spec.n_units => g.clone(),
        Some(_) => return Err(Error::invalid("group vector does not match units")),
        None => vec![0; spec.n_units],
    };
    let n_groups = unit_group.iter().copied().max().unwrap_or(0) + 1;
    let (terms, center) = two_way_terms(cells, spec, &unit_group, n_groups);
    let weights: Vec<f64> = cells.iter().map(|c| c.weight).collect();
    let absorber = Absorber::new(terms, weights, spec.method)?;

    let (n_components, comp) = absorber.components();
    let active_groups: std::collections::BTreeSet<usize> =
        cells.iter().filter(|c| c.weight > 0.0).map(|c| unit_group[c.unit]).collect();
    if n_components != active_groups.len() {
        return Err(Error::Disconnected { components: n_components });
    }

    let y: Vec<f64> = cells.iter().map(|c| c.y).collect();
    let proj = absorber.project(&y)?;
    let residuals: Vec<f64> = y.iter().zip(&proj.fitted).map(|(a, b)| a - b).collect();

    let nu = spec.n_units;
    let np = spec.n_periods;
    let mut alpha: Vec<Option<f64>> =
        (0..nu).map(|u| (absorber.level_weight(0, u) > 0.0).then(|| proj.coefs[0][u])).collect();
    let mut slopes: Option<Vec<Option<f64>>> = spec
        .unit_trends
        .then(|| (0..nu).map(|u| absorber.slope_identified(0, u).then(|| proj.coefs[0][nu + u])).collect());
    let mut period_effects: Vec<Vec<Option<f64>>> = (0..n_groups)
        .map(|g| {
            (0..np)
                .map(|t| {
                    let l = g * np + t;
                    (absorber.level_weight(1, l) > 0.0).then(|| proj.coefs[1][l])
                })
                .collect()
        })
        .collect();
    debug_assert!(comp[1].iter().flatten().count() > 0);

    // normalization per group
    for g in 0..n_groups {
        let est: Vec<usize> = (0..np).filter(|&t| period_effects[g][t].is_some()).collect();
        let (Some(&t0), Some(&t1)) = (est.first(), est.last()) else { continue };
        let b0 = period_effects[g][t0].unwrap();
        let b1 = period_effects[g][t1].unwrap();
        let c = if spec.unit_trends && t1 > t0 { (b1 - b0) / (t1 - t0) as f64 } else { 0.0 };
        let a = b0 - c * (t0 as f64 - center);
        for (t, b) in period_effects[g].iter_mut().enumerate() {
            if let Some(b) = b {
                *b -= a + c * (t as f64 - center);
            }
        }
        for u in (0..nu).filter(|&u| unit_group[u] == g) {
            if let Some(al) = alpha[u].as_mut() {
                *al += a;
            }
            if let Some(s) = slopes.as_mut().and_then(|s| s[u].as_mut()) {
                *s += c;
            }
        }
    }
    if spec.unit_trends {
        // a unit without two distinct periods has no identified slope
        for u in 0..nu {
            if slopes.as_ref().unwrap()[u].is_none() {
                alpha[u] = None;
            }
        }
    }

    let beta = period_effects[0].clone();
    let group_beta =
        (n_groups > 1).then(|| (0..np).map(|t| Some(period_effects[1][t]? - period_effects[0][t]?)).collect());
    let normalization = if spec.unit_trends {
        "per group, first and last estimable period effects are zero; unit slopes on (t - mean t)".to_string()
    } else {
        "per group, first estimable period effect is zero".to_string()
    };
    let method = absorber.method();
    Ok(FeFit {
        alpha,
        beta,
        group_beta,
        unit_trend: slopes.take(),
        trend_center: center,
        residuals,
        normalization,
        iterations: proj.iterations,
        converged: true,
        method,
        period_effects,
        unit_group,
        n_periods: np,
        absorber,
    })
}
