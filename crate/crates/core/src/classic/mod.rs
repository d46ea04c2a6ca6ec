//! Comparison estimators: the annual two-period DD, pooled TWFE (OLS on logs
//! or PPML on counts), interaction-instrument 2SLS, and launch-timing
//! diagnostics.

mod iv;
mod timing;

pub use iv::{build_instruments, iv_dd, IvInstrumentSet, IvMargin, IvResult, TimeDriver};
pub use timing::{launch_timing_regression, neighbor_launch_regression, pretrend_launch_regression, NeighborWindow};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{absorbed_ols, cluster_robust_vcov, ppml_fit, Absorber, DesignMatrix, FeMethod, Term};
use crate::imputation::{inference, EffectEstimate};
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraFe {
    #[default]
    None,
    CountryYear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwfeOutcome {
    #[default]
    Log,
    CountsPpml,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
}

/// Regression output ready for CSV emission.
#[derive(Debug, Clone, Serialize)]
pub struct CoefTable {
    pub title: String,
    pub rows: Vec<CoefRow>,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// Multiplier already applied to estimates and SEs.
    pub scale: f64,
    pub notes: Vec<String>,
}

impl CoefTable {
    pub fn row(&self, term: &str) -> Option<&CoefRow> {
        self.rows.iter().find(|r| r.term == term)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,estimate,se,p_value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.term, r.estimate, r.se, r.p_value);
        }
        s
    }
}

/// Observed cells in panel order, for regressions built directly on the grid.
pub(crate) fn observed(panel: &Panel) -> Vec<(usize, usize)> {
    panel.cells().map(|(u, t, _)| (u, t)).collect()
}

/// Unit and period factors, plus country × year when asked.
pub(crate) fn panel_terms(panel: &Panel, rows: &[(usize, usize)], extra: ExtraFe) -> Vec<Term> {
    let mut terms = vec![
        Term::factor("unit", rows.iter().map(|&(u, _)| u as u32).collect(), panel.n_units()),
        Term::factor("period", rows.iter().map(|&(_, t)| t as u32).collect(), panel.n_periods()),
    ];
    if extra == ExtraFe::CountryYear {
        let mut ids: BTreeMap<(String, i32), u32> = BTreeMap::new();
        let keys: Vec<(String, i32)> =
            rows.iter().map(|&(u, t)| (panel.units()[u].country.clone(), panel.periods()[t].year)).collect();
        for k in &keys {
            let n = ids.len() as u32;
            ids.entry(k.clone()).or_insert(n);
        }
        terms.push(Term::factor("country_year", keys.iter().map(|k| ids[k]).collect(), ids.len()));
    }
    terms
}

fn log_counts(panel: &Panel, rows: &[(usize, usize)]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|&(u, t)| {
            let a = panel.cell(u, t).unwrap().accidents;
            if a <= 0.0 {
                Err(Error::ZeroCount { unit: panel.units()[u].id.clone(), period: panel.periods()[t].to_string() })
            } else {
                Ok(a.ln())
            }
        })
        .collect()
}

fn treatment(panel: &Panel, rows: &[(usize, usize)]) -> Vec<f64> {
    rows.iter().map(|&(u, t)| f64::from(u8::from(panel.is_treated(u, t)))).collect()
}

fn estimate_from(name: &str, b: f64, se: f64, n_obs: usize, n_units: usize, n_treated: usize) -> EffectEstimate {
    let (crit, p) = inference(b, se, None);
    let mut e = EffectEstimate::new(name, b, se, crit, p);
    e.n_total_cells = n_obs;
    e.n_units = n_units;
    e.n_treated_cells = n_treated;
    e
}

/// OLS of log accidents on unit and year effects plus the treatment dummy on
/// a two-period panel from `aggregate_annual`; clustered by unit.
pub fn annual_dd(panel2: &Panel) -> Result<EffectEstimate> {
    if panel2.n_periods() != 2 {
        return Err(Error::invalid("annual DD needs exactly two periods"));
    }
    let n_treated = (0..panel2.n_units()).filter(|&u| panel2.is_treated(u, 1)).count();
    if n_treated == 0 || n_treated == panel2.n_units() {
        return Err(Error::EmptySupport("annual DD needs both a treated and a control group".into()));
    }
    if (0..panel2.n_units()).any(|u| panel2.is_treated(u, 0)) {
        return Err(Error::invalid("units treated in the first period"));
    }
    let rows = observed(panel2);
    let y = log_counts(panel2, &rows)?;
    let d = treatment(panel2, &rows);
    let absorber = Absorber::new(panel_terms(panel2, &rows, ExtraFe::None), vec![1.0; rows.len()], FeMethod::Dense)?;
    let x = DesignMatrix::new(
        vec!["treated".into()],
        vec![d.clone()],
        rows.iter().map(|&(u, _)| u).collect(),
        vec![1.0; rows.len()],
    )?;
    let (fit, tilde, _) = absorbed_ols(&absorber, &x, &y)?;
    let b = fit.coefficients[0].ok_or_else(|| Error::estimation("treatment has no within variation"))?;
    let vc = cluster_robust_vcov(&tilde, &fit.residuals)?;
    let n_treated_cells = d.iter().filter(|&&v| v > 0.0).count();
    Ok(estimate_from("annual_dd", b, vc.se(0), rows.len(), panel2.n_units(), n_treated_cells))
}

#[derive(Debug, Clone, Serialize)]
pub struct TwfeResult {
    pub estimate: EffectEstimate,
    /// Cells dropped because every unit in their country-year was treated.
    pub dropped_cells: usize,
    pub notes: Vec<String>,
}

/// Pooled two-way fixed effects DD: a single treatment coefficient with unit
/// and period effects, optionally country × year effects. Country-years in
/// which every observed unit is treated carry no control information and
/// are dropped when country × year effects are requested.
pub fn twfe_dd(panel: &Panel, extra: ExtraFe, outcome: TwfeOutcome, method: FeMethod) -> Result<TwfeResult> {
    let mut rows = observed(panel);
    let mut notes = Vec::new();
    let mut dropped_cells = 0;
    if extra == ExtraFe::CountryYear {
        let mut untreated: BTreeSet<(String, i32)> = BTreeSet::new();
        for &(u, t) in &rows {
            if !panel.is_treated(u, t) {
                untreated.insert((panel.units()[u].country.clone(), panel.periods()[t].year));
            }
        }
        let before = rows.len();
        let mut gone: BTreeSet<(String, i32)> = BTreeSet::new();
        rows.retain(|&(u, t)| {
            let k = (panel.units()[u].country.clone(), panel.periods()[t].year);
            let keep = untreated.contains(&k);
            if !keep {
                gone.insert(k);
            }
            keep
        });
        dropped_cells = before - rows.len();
        for (c, y) in gone {
            notes.push(format!("{c} {y}: all units treated; dropped"));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySupport("no cells left for TWFE".into()));
    }
    let d = treatment(panel, &rows);
    let n_treated = d.iter().filter(|&&v| v > 0.0).count();
    let clusters: Vec<usize> = rows.iter().map(|&(u, _)| u).collect();
    let terms = panel_terms(panel, &rows, extra);
    let x = DesignMatrix::new(vec!["treated".into()], vec![d], clusters, vec![1.0; rows.len()])?;
    let (name, b, se) = match outcome {
        TwfeOutcome::Log => {
            let y = log_counts(panel, &rows)?;
            let absorber = Absorber::new(terms, vec![1.0; rows.len()], method)?;
            let (fit, tilde, _) = absorbed_ols(&absorber, &x, &y)?;
            let b = fit.coefficients[0].ok_or_else(|| Error::estimation("treatment has no within variation"))?;
            let vc = cluster_robust_vcov(&tilde, &fit.residuals)?;
            ("twfe_ols", b, vc.se(0))
        }
        TwfeOutcome::CountsPpml => {
            let y: Vec<f64> = rows.iter().map(|&(u, t)| panel.cell(u, t).unwrap().accidents).collect();
            let fit = ppml_fit(&y, &terms, &x, method)?;
            let b = fit.coefficients[0].ok_or_else(|| Error::estimation("treatment has no within variation"))?;
            ("twfe_ppml", b, fit.vcov.se(0))
        }
    };
    let name = if extra == ExtraFe::CountryYear { format!("{name}_country_year") } else { name.to_string() };
    Ok(TwfeResult {
        estimate: estimate_from(&name, b, se, rows.len(), panel.n_units(), n_treated),
        dropped_cells,
        notes,
    })
}
