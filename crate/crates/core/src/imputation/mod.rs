//! Imputation estimator for staggered adoption: unit and period effects are
//! fitted on untreated cells only, treated counterfactuals are imputed from
//! them, and cell-level effects are averaged under an estimand's weights.

mod cohort;
mod event;
mod hetero;
mod placebo;
mod scheme;
mod variance;

pub use cohort::{build_cohorts, default_rules, half_year_rules, quarter_rules, CohortMap, Granularity, MergeRule};
pub use event::{event_study, EventPoint, EventStudyOptions, EventStudyProfile};
pub use hetero::{heterogeneity, split_weights, HeterogeneityResult};
pub use placebo::{placebo_event_study, placebo_panel, PlaceboRun, PLACEBO_LEVEL};
pub use scheme::{aggregate, covid_periods, SchemeKind, WeightScheme, NON_WINTER_MONTHS, WINTER_MONTHS};
pub use variance::{leave_out_se, LeaveOutRule, SeReport, VarianceOptions};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::fe::{fit_two_way_fe, FeCell, FeFit, FeMethod, TwoWaySpec};
use crate::panel::{log_outcome, CellGrid, Panel, Side};

pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[default]
    LogAccidents,
    SlightShare,
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub outcome: Outcome,
    /// Add never-treated units to the control sample. The default uses
    /// not-yet-treated cells of eventually treated units only.
    pub include_never: bool,
}

#[derive(Debug, Clone)]
pub struct ImputationSample {
    pub panel: Panel,
    pub y: CellGrid<f64>,
    pub notices: Vec<String>,
}

impl ImputationSample {
    pub fn n_cells(&self) -> usize {
        self.y.iter().count()
    }
}

/// Restrict the panel to the estimation sample and build the outcome grid.
/// Treated units without any untreated cell cannot have their unit effect
/// estimated and are dropped with a notice.
pub fn prepare_sample(panel: &Panel, opts: &SampleOptions) -> Result<ImputationSample> {
    let mut notices = Vec::new();
    let mut p = panel.clone();
    if !opts.include_never {
        let never = p.units().iter().filter(|u| u.launch.is_none()).count();
        if never > 0 {
            p = p.filter_units(|u| u.launch.is_some())?;
            notices.push(format!("{never} never-treated units excluded from the control sample"));
        }
    }
    let always: Vec<usize> = (0..p.n_units())
        .filter(|&u| {
            p.units()[u].launch.is_some() && (0..p.n_periods()).all(|t| p.cell(u, t).is_none() || p.is_treated(u, t))
        })
        .collect();
    if !always.is_empty() {
        let ids: Vec<String> = always.iter().map(|&u| p.units()[u].id.clone()).collect();
        notices.push(format!("units without untreated cells dropped: {}", ids.join(", ")));
        let drop: std::collections::BTreeSet<String> = ids.into_iter().collect();
        p = p.filter_units(|u| !drop.contains(&u.id))?;
    }
    if p.n_units() == 0 {
        return Err(Error::invalid("estimation sample has no units"));
    }
    let y = match opts.outcome {
        Outcome::LogAccidents => log_outcome(&p)?,
        Outcome::SlightShare => {
            let mut g = CellGrid::new(p.n_units(), p.n_periods());
            let mut missing = 0;
            for (u, t, c) in p.cells() {
                match c.slight_share {
                    Some(s) => g.set(u, t, s),
                    None => missing += 1,
                }
            }
            if missing > 0 {
                notices.push(format!("{missing} cells without a severity share skipped"));
            }
            g
        }
    };
    Ok(ImputationSample { panel: p, y, notices })
}

/// Two-way fit on the untreated cells of a sample.
#[derive(Debug, Clone)]
pub struct ImputationFit {
    pub fe: FeFit,
    /// `(unit, period)` of each estimation cell, aligned with `fe.residuals`.
    pub cells: Vec<(usize, usize)>,
    pub sides: Option<Vec<Side>>,
    pub(crate) leverage: std::sync::OnceLock<std::result::Result<std::sync::Arc<variance::Leverage>, String>>,
}

pub fn fit_untreated(
    sample: &ImputationSample,
    sides: Option<&[Side]>,
    unit_trends: bool,
    method: FeMethod,
) -> Result<ImputationFit> {
    let panel = &sample.panel;
    let mut cells = Vec::new();
    let mut fe_cells = Vec::new();
    let mut has_untreated = vec![false; panel.n_units()];
    let mut has_treated = vec![false; panel.n_units()];
    for (u, t, &y) in sample.y.iter() {
        if panel.is_treated(u, t) {
            has_treated[u] = true;
        } else {
            has_untreated[u] = true;
            cells.push((u, t));
            fe_cells.push(FeCell { unit: u, period: t, y, weight: 1.0 });
        }
    }
    if let Some(u) = (0..panel.n_units()).find(|&u| has_treated[u] && !has_untreated[u]) {
        return Err(Error::estimation(format!("unit '{}' has no untreated cells", panel.units()[u].id)));
    }
    if let Some(s) = sides {
        if s.len() != panel.n_units() {
            return Err(Error::invalid("group split does not match the sample"));
        }
    }
    let spec = TwoWaySpec {
        n_units: panel.n_units(),
        n_periods: panel.n_periods(),
        groups: sides.map(|s| s.iter().map(|s| s.index()).collect()),
        unit_trends,
        method,
    };
    let fe = fit_two_way_fe(&fe_cells, &spec)?;
    Ok(ImputationFit { fe, cells, sides: sides.map(|s| s.to_vec()), leverage: Default::default() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreatedCell {
    pub unit: usize,
    pub period: usize,
    pub event_time: i64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CellEffects {
    pub cells: Vec<TreatedCell>,
    /// Treated cells whose counterfactual is not identified.
    pub excluded: Vec<(usize, usize)>,
}

/// `τ̂_it = y_it − α̂_i − β̂_t` on every treated cell.
pub fn impute_effects(sample: &ImputationSample, fit: &ImputationFit) -> CellEffects {
    let mut out = CellEffects::default();
    for (u, t, &y) in sample.y.iter() {
        if !sample.panel.is_treated(u, t) {
            continue;
        }
        match fit.fe.predict(u, t) {
            Some(yhat) => out.cells.push(TreatedCell {
                unit: u,
                period: t,
                event_time: sample.panel.event_time(u, t).unwrap(),
                tau: y - yhat,
            }),
            None => out.excluded.push((u, t)),
        }
    }
    out
}

/// `(100(e^τ − 1), 100 e^τ se)`.
pub fn to_semi_elasticity(tau: f64, se: f64) -> (f64, f64) {
    (100.0 * tau.exp_m1(), 100.0 * tau.exp() * se)
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub estimand: String,
    pub tau_hat: f64,
    pub se: f64,
    pub semi_elasticity_pct: f64,
    pub semi_elasticity_se_pct: f64,
    /// 95% interval in percent, mapped through the transform.
    pub ci95_low_pct: f64,
    pub ci95_high_pct: f64,
    pub p_value: f64,
    pub n_treated_cells: usize,
    pub n_total_cells: usize,
    pub n_units: usize,
    pub leave_out_fallbacks: usize,
}

impl EffectEstimate {
    pub fn new(estimand: impl Into<String>, tau_hat: f64, se: f64, crit: f64, p_value: f64) -> Self {
        let (pct, pct_se) = to_semi_elasticity(tau_hat, se);
        EffectEstimate {
            estimand: estimand.into(),
            tau_hat,
            se,
            semi_elasticity_pct: pct,
            semi_elasticity_se_pct: pct_se,
            ci95_low_pct: 100.0 * (tau_hat - crit * se).exp_m1(),
            ci95_high_pct: 100.0 * (tau_hat + crit * se).exp_m1(),
            p_value,
            n_treated_cells: 0,
            n_total_cells: 0,
            n_units: 0,
            leave_out_fallbacks: 0,
        }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.ci95_low_pct, self.ci95_high_pct)
    }
}

/// Critical value and two-sided p-value; normal unless `t_df` is given.
pub fn inference(tau: f64, se: f64, t_df: Option<f64>) -> (f64, f64) {
    let z = if se > 0.0 {
        (tau / se).abs()
    } else if tau == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    match t_df {
        Some(df) if df >= 1.0 => {
            let t = StudentsT::new(0.0, 1.0, df).unwrap();
            (t.inverse_cdf(0.975), 2.0 * (1.0 - t.cdf(z)))
        }
        _ => {
            let n = Normal::standard();
            (Z_95, 2.0 * (1.0 - n.cdf(z)))
        }
    }
}

/// A fitted imputation model ready to evaluate any number of estimands.
#[derive(Debug, Clone)]
pub struct Imputation<'a> {
    pub sample: &'a ImputationSample,
    pub fit: ImputationFit,
    pub effects: CellEffects,
}

impl<'a> Imputation<'a> {
    pub fn new(
        sample: &'a ImputationSample,
        sides: Option<&[Side]>,
        unit_trends: bool,
        method: FeMethod,
    ) -> Result<Self> {
        let fit = fit_untreated(sample, sides, unit_trends, method)?;
        let effects = impute_effects(sample, &fit);
        Ok(Imputation { sample, fit, effects })
    }

    pub fn weights(&self, scheme: &WeightScheme) -> Result<Vec<f64>> {
        scheme.weights(&self.sample.panel, &self.effects, self.fit.sides.as_deref())
    }

    pub fn estimate(
        &self,
        scheme: &WeightScheme,
        cohorts: &CohortMap,
        opts: &VarianceOptions,
    ) -> Result<EffectEstimate> {
        let w = self.weights(scheme)?;
        self.estimate_weights(&scheme.name, &w, cohorts, opts)
    }

    pub fn estimate_weights(
        &self,
        name: &str,
        weights: &[f64],
        cohorts: &CohortMap,
        opts: &VarianceOptions,
    ) -> Result<EffectEstimate> {
        let tau = aggregate(&self.effects, weights)?;
        let se = leave_out_se(self.sample, &self.fit, &self.effects, cohorts, weights, opts)?;
        let df = opts.t_inference.then_some(se.n_clusters as f64 - 1.0);
        let (crit, p) = inference(tau, se.se, df);
        let mut e = EffectEstimate::new(name, tau, se.se, crit, p);
        e.n_treated_cells = weights.iter().filter(|&&w| w != 0.0).count();
        e.n_total_cells = self.sample.n_cells();
        e.n_units = self.sample.panel.n_units();
        e.leave_out_fallbacks = se.fallbacks;
        Ok(e)
    }
}

/// Everything needed to go from a panel to one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub granularity: Granularity,
    pub include_never: bool,
    pub outcome: Outcome,
    pub unit_trends: bool,
    pub leave_out: bool,
    pub t_inference: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            granularity: Granularity::Quarter,
            include_never: false,
            outcome: Outcome::LogAccidents,
            unit_trends: false,
            leave_out: true,
            t_inference: false,
        }
    }
}

impl PipelineOptions {
    pub fn sample(&self) -> SampleOptions {
        SampleOptions { outcome: self.outcome, include_never: self.include_never }
    }

    pub fn variance(&self) -> VarianceOptions {
        VarianceOptions { leave_out: self.leave_out, t_inference: self.t_inference, ..Default::default() }
    }
}

pub fn estimate_scheme(panel: &Panel, opts: &PipelineOptions, scheme: &WeightScheme) -> Result<EffectEstimate> {
    let sample = prepare_sample(panel, &opts.sample())?;
    let cohorts = build_cohorts(&sample.panel, opts.granularity, &default_rules(opts.granularity));
    let imp = Imputation::new(&sample, None, opts.unit_trends, FeMethod::Auto)?;
    imp.estimate(scheme, &cohorts, &opts.variance())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PeriodId, UnitMeta};

    fn two_by_two() -> ImputationSample {
        let units = vec![
            UnitMeta::new("A", "X").with_launch(Some(PeriodId::monthly(2020, 2))),
            UnitMeta::new("B", "X").with_launch(Some(PeriodId::monthly(2020, 3))),
        ];
        let panel =
            Panel::from_counts(PeriodId::monthly(2020, 1), units, &[vec![1.0, 1.5, 1.0], vec![2.0, 2.2, 1.0]]).unwrap();
        // outcomes directly in logs
        let mut y = CellGrid::new(2, 3);
        for (u, t, v) in [(0, 0, 1.0), (0, 1, 1.5), (1, 0, 2.0), (1, 1, 2.2)] {
            y.set(u, t, v);
        }
        ImputationSample { panel, y, notices: vec![] }
    }

    #[test]
    fn hand_solved_two_by_two() {
        let s = two_by_two();
        let imp = Imputation::new(&s, None, false, FeMethod::Dense).unwrap();
        assert!((imp.fit.fe.alpha[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((imp.fit.fe.alpha[1].unwrap() - 2.0).abs() < 1e-12);
        assert!((imp.fit.fe.beta[1].unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(imp.effects.cells.len(), 1);
        assert!((imp.effects.cells[0].tau - 0.3).abs() < 1e-12);
        // period 2 has no untreated cell
        assert!(imp.effects.excluded.is_empty());
    }

    #[test]
    fn semi_elasticity() {
        assert_eq!(to_semi_elasticity(0.0, 0.1).0, 0.0);
        assert!((to_semi_elasticity(0.041, 0.0).0 - 4.19).abs() < 0.005);
        assert!((to_semi_elasticity(1.082f64.ln(), 0.0).0 - 8.2).abs() < 1e-9);
        let (_, se) = to_semi_elasticity(0.1, 0.02);
        assert!((se - 100.0 * 0.1f64.exp() * 0.02).abs() < 1e-12);
    }

    #[test]
    fn always_treated_units_dropped() {
        let units = vec![
            UnitMeta::new("A", "X").with_launch(Some(PeriodId::monthly(2019, 1))),
            UnitMeta::new("B", "X").with_launch(Some(PeriodId::monthly(2020, 2))),
            UnitMeta::new("C", "X"),
        ];
        let panel = Panel::from_counts(PeriodId::monthly(2020, 1), units, &vec![vec![3.0; 3]; 3]).unwrap();
        let s = prepare_sample(&panel, &SampleOptions::default()).unwrap();
        assert_eq!(s.panel.n_units(), 1);
        assert_eq!(s.notices.len(), 2);
        let s = prepare_sample(&panel, &SampleOptions { include_never: true, ..Default::default() }).unwrap();
        assert_eq!(s.panel.n_units(), 2);
    }
}
