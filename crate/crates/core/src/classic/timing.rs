//! Diagnostics for the timing of launches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{observed, panel_terms, CoefRow, CoefTable, ExtraFe};
use crate::error::{Error, Result};
use crate::fe::{absorbed_ols, cluster_robust_vcov, hc1_vcov, solve_wls, Absorber, DesignMatrix, FeMethod};
use crate::imputation::inference;
use crate::panel::Panel;

fn rows_from(names: &[String], ests: &[Option<f64>], ses: &[f64], scale: f64, notes: &mut Vec<String>) -> Vec<CoefRow> {
    let mut out = Vec::new();
    let mut pos = 0;
    for (name, b) in names.iter().zip(ests) {
        match b {
            Some(b) => {
                let se = ses[pos];
                pos += 1;
                let (_, p) = inference(*b, se, None);
                out.push(CoefRow { term: name.clone(), estimate: scale * b, se: scale * se, p_value: p });
            }
            None => notes.push(format!("{name} has no variation; dropped")),
        }
    }
    out
}

/// OLS of the launch month (months since panel start) on population in
/// 100k and standardized attributes, with country effects; HC1 errors.
pub fn launch_timing_regression(panel: &Panel) -> Result<CoefTable> {
    let treated = panel.ever_treated_units();
    let units = panel.units();
    let attrs: BTreeSet<String> = treated.iter().flat_map(|&u| units[u].attributes.keys().cloned()).collect();
    let countries: BTreeSet<&str> = treated.iter().map(|&u| units[u].country.as_str()).collect();
    let k = 2 + attrs.len() + countries.len().saturating_sub(1);
    if treated.len() <= k {
        return Err(Error::invalid(format!("{} treated units for {k} regressors", treated.len())));
    }
    let y: Vec<f64> = treated.iter().map(|&u| panel.launch_offset(u).unwrap() as f64).collect();
    let mut names = vec!["intercept".to_string(), "population_100k".to_string()];
    let mut cols = vec![vec![1.0; treated.len()], treated.iter().map(|&u| units[u].population as f64 / 1e5).collect()];
    for a in &attrs {
        let raw: Vec<f64> = treated
            .iter()
            .map(|&u| {
                units[u]
                    .attributes
                    .get(a)
                    .copied()
                    .ok_or_else(|| Error::MissingValue(format!("attribute '{a}' for unit '{}'", units[u].id)))
            })
            .collect::<Result<_>>()?;
        let n = raw.len() as f64;
        let m = raw.iter().sum::<f64>() / n;
        let sd = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        names.push(format!("{a}_std"));
        cols.push(raw.iter().map(|v| (v - m) / sd).collect());
    }
    for c in countries.iter().skip(1) {
        names.push(format!("country_{c}"));
        cols.push(treated.iter().map(|&u| f64::from(u8::from(units[u].country == *c))).collect());
    }
    let x = DesignMatrix::unweighted(names.clone(), cols)?;
    let fit = solve_wls(&x, &y)?;
    let kept = fit.kept();
    let vc = hc1_vcov(&x.select(&kept), &fit.residuals)?;
    let mut notes = Vec::new();
    let rows = rows_from(&names, &fit.coefficients, &vc.ses(), 1.0, &mut notes);
    Ok(CoefTable {
        title: "launch month on unit characteristics".into(),
        rows,
        n_obs: treated.len(),
        n_clusters: treated.len(),
        scale: 1.0,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborWindow {
    /// The neighbor's latest launch counts if it falls in the current month or
    /// the `months - 1` months before.
    pub months: usize,
}

impl Default for NeighborWindow {
    fn default() -> Self {
        NeighborWindow { months: 2 }
    }
}

pub(crate) fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * a.sqrt().asin()
}

/// Geodesic-closest other ever-treated unit, per ever-treated unit.
pub fn nearest_neighbors(panel: &Panel) -> Result<BTreeMap<usize, usize>> {
    let treated = panel.ever_treated_units();
    let units = panel.units();
    let coord = |u: usize| -> Result<(f64, f64)> {
        match (units[u].latitude, units[u].longitude) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::MissingValue(format!("coordinates for unit '{}'", units[u].id))),
        }
    };
    let mut out = BTreeMap::new();
    for &u in &treated {
        let (a, b) = coord(u)?;
        let mut best: Option<(f64, usize)> = None;
        for &o in treated.iter().filter(|&&o| o != u) {
            let (c, d) = coord(o)?;
            let dist = haversine_km(a, b, c, d);
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, o));
            }
        }
        if let Some((_, o)) = best {
            out.insert(u, o);
        }
    }
    Ok(out)
}

/// Linear probability model of a new-firm launch in the unit-month on a
/// recent launch in the nearest neighbor and the number of new launches in
/// other units of the country, with unit and month effects. Coefficients in
/// percentage points.
pub fn neighbor_launch_regression(panel: &Panel, window: NeighborWindow) -> Result<CoefTable> {
    if window.months == 0 {
        return Err(Error::invalid("neighbor window must be at least one month"));
    }
    let nn = nearest_neighbors(panel)?;
    if nn.is_empty() {
        return Err(Error::invalid("need at least two ever-treated units"));
    }
    let units = panel.units();
    let launch_months: Vec<BTreeSet<usize>> =
        units.iter().map(|m| m.firm_launches.iter().filter_map(|(_, p)| panel.period_index(p)).collect()).collect();
    let rows: Vec<(usize, usize)> = observed(panel).into_iter().filter(|(u, _)| nn.contains_key(u)).collect();
    let y: Vec<f64> = rows.iter().map(|&(u, t)| f64::from(u8::from(launch_months[u].contains(&t)))).collect();
    let recent: Vec<f64> = rows
        .iter()
        .map(|&(u, t)| {
            let n = nn[&u];
            let lo = t.saturating_sub(window.months - 1);
            let last = launch_months[n].range(..=t).next_back();
            f64::from(u8::from(last.is_some_and(|&l| l >= lo)))
        })
        .collect();
    let national: Vec<f64> = rows
        .iter()
        .map(|&(u, t)| {
            nn.keys()
                .filter(|&&o| o != u && units[o].country == units[u].country && launch_months[o].contains(&t))
                .count() as f64
        })
        .collect();
    let names = vec!["neighbor_launch_recent".to_string(), "country_new_launches".to_string()];
    let x = DesignMatrix::new(
        names.clone(),
        vec![recent, national],
        rows.iter().map(|&(u, _)| u).collect(),
        vec![1.0; rows.len()],
    )?;
    let absorber = Absorber::new(panel_terms(panel, &rows, ExtraFe::None), vec![1.0; rows.len()], FeMethod::Auto)?;
    let (fit, tilde, _) = absorbed_ols(&absorber, &x, &y)?;
    let kept = fit.kept();
    let vc = cluster_robust_vcov(&tilde.select(&kept), &fit.residuals)?;
    let mut notes = vec![format!("mean launch probability {:.3} pp", 100.0 * y.iter().sum::<f64>() / y.len() as f64)];
    let rows_out = rows_from(&names, &fit.coefficients, &vc.ses(), 100.0, &mut notes);
    Ok(CoefTable {
        title: "new-firm launch on nearest-neighbor launch".into(),
        rows: rows_out,
        n_obs: rows.len(),
        n_clusters: vc.n_clusters,
        scale: 100.0,
        notes,
    })
}

/// Linear probability model of the launch month indicator, on units still at
/// risk, against the `lag`-month change in log accidents and the change in
/// the log of rolling `lag`-month sums. Unit and month effects, clustered by
/// unit, percentage points.
pub fn pretrend_launch_regression(panel: &Panel, lag: usize) -> Result<CoefTable> {
    if lag == 0 {
        return Err(Error::invalid("lag must be positive"));
    }
    let log_at = |u: usize, t: usize| panel.cell(u, t).filter(|c| c.accidents > 0.0).map(|c| c.accidents.ln());
    let sum_at = |u: usize, t: usize| -> Option<f64> {
        let mut s = 0.0;
        for k in (t + 1 - lag)..=t {
            s += panel.cell(u, k)?.accidents;
        }
        (s > 0.0).then(|| s.ln())
    };
    let mut table = CoefTable {
        title: "launch indicator on lagged accident changes".into(),
        rows: Vec::new(),
        n_obs: 0,
        n_clusters: 0,
        scale: 100.0,
        notes: Vec::new(),
    };
    for (name, first) in [(format!("d{lag}_log_accidents"), lag), (format!("d{lag}_log_rolling_sum"), 2 * lag - 1)] {
        let mut rows = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for u in panel.ever_treated_units() {
            let Some(l) = panel.launch_offset(u) else { continue };
            if l < 0 {
                continue;
            }
            for t in first..panel.n_periods().min(l as usize + 1) {
                let v = if first == lag {
                    log_at(u, t).zip(log_at(u, t - lag)).map(|(a, b)| a - b)
                } else {
                    sum_at(u, t).zip(sum_at(u, t - lag)).map(|(a, b)| a - b)
                };
                if let Some(v) = v {
                    rows.push((u, t));
                    x.push(v);
                    y.push(f64::from(u8::from(t as i64 == l)));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("insufficient pre-launch history for {name}")));
        }
        let d = DesignMatrix::new(
            vec![name.clone()],
            vec![x],
            rows.iter().map(|&(u, _)| u).collect(),
            vec![1.0; rows.len()],
        )?;
        let absorber = Absorber::new(panel_terms(panel, &rows, ExtraFe::None), vec![1.0; rows.len()], FeMethod::Auto)?;
        let (fit, tilde, _) = absorbed_ols(&absorber, &d, &y)?;
        let ses =
            if fit.coefficients[0].is_some() { cluster_robust_vcov(&tilde, &fit.residuals)?.ses() } else { vec![] };
        table.rows.extend(rows_from(&[name], &fit.coefficients, &ses, 100.0, &mut table.notes));
        if table.n_obs == 0 {
            table.n_obs = rows.len();
            table.n_clusters = rows.iter().map(|r| r.0).collect::<BTreeSet<_>>().len();
        }
    }
    Ok(table)
}
