//! Synthetic difference-in-differences for staggered adoption. Each adoption
//! month is a cohort; donors are units not treated anywhere in the window.
//! Cohort effects are pooled with treated-cell-count weights.

mod solver;

pub use solver::{project_simplex, simplex_least_squares, Dense, SimplexSolution, Solver};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputation::{inference, EffectEstimate};
use crate::panel::{log_outcome, Panel, PeriodId};
use crate::par::{map_indexed, rng_for};

pub const DEFAULT_PLACEBO_REPS: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdidConfig {
    /// Ridge scale for unit weights; `None` uses the first-difference noise
    /// level of donors times `(N_treated · T_post)^{1/4}`.
    pub zeta: Option<f64>,
    pub solver: Solver,
    pub max_iters: usize,
    pub tolerance: f64,
    pub placebo_reps: usize,
    pub seed: u64,
    /// Inclusive estimation window; the whole panel when absent.
    pub window: Option<(PeriodId, PeriodId)>,
    /// Calendar months removed from every unit before estimation.
    pub drop_months: BTreeSet<u8>,
    /// Warn when a cohort has fewer donors than this.
    pub min_donors: usize,
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for SdidConfig {
    fn default() -> Self {
        SdidConfig {
            zeta: None,
            solver: Solver::FrankWolfe,
            max_iters: 100_000,
            tolerance: 1e-10,
            placebo_reps: DEFAULT_PLACEBO_REPS,
            seed: 0,
            window: None,
            drop_months: BTreeSet::new(),
            min_donors: 5,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortResult {
    pub adoption: PeriodId,
    pub treated_units: Vec<String>,
    pub donors: Vec<String>,
    pub omega: Vec<f64>,
    pub intercept: f64,
    /// Over `pre_periods`.
    pub lambda: Vec<f64>,
    pub pre_periods: Vec<PeriodId>,
    pub n_post_periods: usize,
    pub tau: f64,
    pub n_treated_cells: usize,
    pub zeta: f64,
    /// Treated mean minus synthetic control over the pre periods.
    pub pre_gaps: Vec<f64>,
    pub mspe: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcludedCohort {
    pub adoption: PeriodId,
    pub n_units: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SdidResult {
    pub cohorts: Vec<CohortResult>,
    pub excluded: Vec<ExcludedCohort>,
    pub tau_pooled: f64,
    pub se_placebo: Option<f64>,
    /// Cohort MSPEs pooled with treated-cell weights.
    pub mspe_monthly: f64,
    pub n_donors: usize,
    pub warnings: Vec<String>,
}

impl SdidResult {
    pub fn to_estimate(&self) -> EffectEstimate {
        let se = self.se_placebo.unwrap_or(f64::NAN);
        let (crit, p) = inference(self.tau_pooled, se, None);
        let mut e = EffectEstimate::new("sdid", self.tau_pooled, se, crit, p);
        e.n_treated_cells = self.cohorts.iter().map(|c| c.n_treated_cells).sum();
        e.n_units = self.n_donors + self.cohorts.iter().map(|c| c.treated_units.len()).sum::<usize>();
        e
    }
}

/// Balanced block of log outcomes over the kept window periods.
struct Block {
    periods: Vec<usize>,
    /// `y[unit][k]` for kept period `k`; `None` for units outside the analysis.
    y: Vec<Option<Vec<f64>>>,
    cohorts: BTreeMap<usize, Vec<usize>>,
    donors: Vec<usize>,
    excluded: Vec<ExcludedCohort>,
}

fn build_block(panel: &Panel, cfg: &SdidConfig) -> Result<Block> {
    let logs = log_outcome(panel)?;
    let (w0, w1) = match cfg.window {
        Some((a, b)) => (
            panel.period_index(&a).ok_or_else(|| Error::invalid(format!("window start {a} outside the panel")))?,
            panel.period_index(&b).ok_or_else(|| Error::invalid(format!("window end {b} outside the panel")))?,
        ),
        None => (0, panel.n_periods() - 1),
    };
    if w0 >= w1 {
        return Err(Error::invalid("window must span at least two periods"));
    }
    let periods: Vec<usize> =
        (w0..=w1).filter(|&t| panel.periods()[t].month.is_none_or(|m| !cfg.drop_months.contains(&m))).collect();
    if periods.len() < 2 {
        return Err(Error::invalid("fewer than two periods left in the window"));
    }
    let mut y = vec![None; panel.n_units()];
    let mut by_adoption: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut donors = Vec::new();
    for u in 0..panel.n_units() {
        // first kept period at or after launch
        let adoption = panel.units()[u].launch.map(|l| periods.iter().position(|&t| panel.periods()[t] >= l));
        let role = match adoption {
            None | Some(None) => Some(None),
            Some(Some(0)) => None,
            Some(Some(k)) => Some(Some(k)),
        };
        let Some(role) = role else { continue };
        let row: Option<Vec<f64>> = periods.iter().map(|&t| logs.get(u, t).copied()).collect();
        let Some(row) = row else {
            return Err(Error::invalid(format!(
                "unit '{}' is not observed in every window period (balanced panel required)",
                panel.units()[u].id
            )));
        };
        y[u] = Some(row);
        match role {
            None => donors.push(u),
            Some(k) => by_adoption.entry(k).or_default().push(u),
        }
    }
    let mut excluded = Vec::new();
    let mut cohorts = BTreeMap::new();
    for (k, units) in by_adoption {
        let adoption = panel.periods()[periods[k]];
        if k < 2 {
            excluded.push(ExcludedCohort {
                adoption,
                n_units: units.len(),
                reason: "fewer than two pre periods".into(),
            });
        } else if donors.is_empty() {
            excluded.push(ExcludedCohort { adoption, n_units: units.len(), reason: "no donors".into() });
        } else {
            cohorts.insert(k, units);
        }
    }
    if cohorts.is_empty() {
        return Err(Error::EmptySupport("no cohort with donors and pre periods in the window".into()));
    }
    Ok(Block { periods, y, cohorts, donors, excluded })
}

struct CohortFit {
    omega: Vec<f64>,
    intercept: f64,
    lambda: Vec<f64>,
    tau: f64,
    zeta: f64,
    gaps: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation (n − 1) of first differences of the donors' pre-period
/// outcomes.
fn noise_level(rows: &[&[f64]], t0: usize) -> f64 {
    let d: Vec<f64> = rows.iter().flat_map(|r| (1..t0).map(move |t| r[t] - r[t - 1])).collect();
    if d.len() < 2 {
        return 0.0;
    }
    let m = mean(&d);
    (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
}

fn fit_cohort(treated: &[&[f64]], donors: &[&[f64]], t0: usize, cfg: &SdidConfig) -> Result<CohortFit> {
    let t = treated[0].len();
    let t1 = t - t0;
    let tr: Vec<f64> = (0..t).map(|s| treated.iter().map(|r| r[s]).sum::<f64>() / treated.len() as f64).collect();
    let zeta = match cfg.zeta {
        Some(z) => z,
        None => ((treated.len() * t1) as f64).powf(0.25) * noise_level(donors, t0),
    };

    // unit weights on time-centered pre-period outcomes
    let target_mean = mean(&tr[..t0]);
    let donor_means: Vec<f64> = donors.iter().map(|r| mean(&r[..t0])).collect();
    let a = Dense::from_columns(
        &donors.iter().zip(&donor_means).map(|(r, m)| r[..t0].iter().map(|v| v - m).collect()).collect::<Vec<_>>(),
    );
    let b: Vec<f64> = tr[..t0].iter().map(|v| v - target_mean).collect();
    let w = simplex_least_squares(&a, &b, zeta * zeta * t0 as f64, cfg.solver, cfg.max_iters, cfg.tolerance)?;
    let omega = w.x;
    let intercept = target_mean - omega.iter().zip(&donor_means).map(|(o, m)| o * m).sum::<f64>();

    // time weights: pre periods predicting each donor's post mean, centered across donors
    let post_means: Vec<f64> = donors.iter().map(|r| mean(&r[t0..])).collect();
    let pm = mean(&post_means);
    let col_means: Vec<f64> = (0..t0).map(|s| donors.iter().map(|r| r[s]).sum::<f64>() / donors.len() as f64).collect();
    let tcols: Vec<Vec<f64>> = (0..t0).map(|s| donors.iter().map(|r| r[s] - col_means[s]).collect()).collect();
    let c: Vec<f64> = post_means.iter().map(|v| v - pm).collect();
    let lambda =
        simplex_least_squares(&Dense::from_columns(&tcols), &c, 0.0, cfg.solver, cfg.max_iters, cfg.tolerance)?.x;

    let lam_dot = |r: &[f64]| lambda.iter().zip(r).map(|(l, v)| l * v).sum::<f64>();
    let tr_dd = mean(&tr[t0..]) - lam_dot(&tr[..t0]);
    let co_dd: f64 = omega.iter().zip(donors).zip(&post_means).map(|((o, r), pmj)| o * (pmj - lam_dot(&r[..t0]))).sum();
    let gaps: Vec<f64> =
        (0..t0).map(|s| tr[s] - intercept - omega.iter().zip(donors).map(|(o, r)| o * r[s]).sum::<f64>()).collect();
    Ok(CohortFit { omega, intercept, lambda, tau: tr_dd - co_dd, zeta, gaps })
}

fn pooled(fits: &[(f64, usize)]) -> f64 {
    let n: usize = fits.iter().map(|f| f.1).sum();
    fits.iter().map(|(t, k)| t * *k as f64).sum::<f64>() / n as f64
}

pub fn sdid_estimate(panel: &Panel, cfg: &SdidConfig) -> Result<SdidResult> {
    validate(cfg)?;
    let block = build_block(panel, cfg)?;
    let row = |u: usize| block.y[u].as_deref().unwrap();
    let donor_rows: Vec<&[f64]> = block.donors.iter().map(|&u| row(u)).collect();
    let ids = |us: &[usize]| us.iter().map(|&u| panel.units()[u].id.clone()).collect::<Vec<_>>();
    let mut cohorts = Vec::new();
    let mut warnings = Vec::new();
    for (&k, units) in &block.cohorts {
        let treated: Vec<&[f64]> = units.iter().map(|&u| row(u)).collect();
        let f = fit_cohort(&treated, &donor_rows, k, cfg)?;
        let n_post = block.periods.len() - k;
        let mspe = f.gaps.iter().map(|g| g * g).sum::<f64>() / k as f64;
        let adoption = panel.periods()[block.periods[k]];
        if block.donors.len() < cfg.min_donors {
            warnings.push(format!("cohort {adoption}: only {} donors", block.donors.len()));
        }
        cohorts.push(CohortResult {
            adoption,
            treated_units: ids(units),
            donors: ids(&block.donors),
            omega: f.omega,
            intercept: f.intercept,
            lambda: f.lambda,
            pre_periods: block.periods[..k].iter().map(|&t| panel.periods()[t]).collect(),
            n_post_periods: n_post,
            tau: f.tau,
            n_treated_cells: units.len() * n_post,
            zeta: f.zeta,
            pre_gaps: f.gaps,
            mspe,
        });
    }
    let weights: Vec<(f64, usize)> = cohorts.iter().map(|c| (c.tau, c.n_treated_cells)).collect();
    let tau_pooled = pooled(&weights);
    let mspe_monthly = pooled(&cohorts.iter().map(|c| (c.mspe, c.n_treated_cells)).collect::<Vec<_>>());
    for e in &block.excluded {
        warnings.push(format!("cohort {} ({} units) excluded: {}", e.adoption, e.n_units, e.reason));
    }
    let se_placebo = if cfg.placebo_reps >= 2 {
        let (se, disjoint) = placebo_se(&block, cfg)?;
        if !disjoint {
            warnings.push(format!(
                "{} donors cannot cover all treated units at once; placebo cohorts drawn separately",
                block.donors.len()
            ));
        }
        Some(se)
    } else {
        None
    };
    Ok(SdidResult {
        cohorts,
        excluded: block.excluded.clone(),
        tau_pooled,
        se_placebo,
        mspe_monthly,
        n_donors: block.donors.len(),
        warnings,
    })
}

/// Placebo standard error. In each replicate the cohorts' treated units are
/// replaced by the same numbers of donors, drawn without replacement and
/// disjoint across cohorts; the donors left over are the common control
/// pool, and the pooled estimate is recomputed. When the donors cannot cover
/// all cohorts at once, each cohort draws separately from the full pool.
pub fn sdid_placebo_variance(panel: &Panel, cfg: &SdidConfig) -> Result<f64> {
    validate(cfg)?;
    if cfg.placebo_reps < 2 {
        return Err(Error::invalid("placebo variance needs at least two replications"));
    }
    Ok(placebo_se(&build_block(panel, cfg)?, cfg)?.0)
}

/// Placebo SE and whether the draws were disjoint across cohorts.
fn placebo_se(block: &Block, cfg: &SdidConfig) -> Result<(f64, bool)> {
    let nd = block.donors.len();
    for (k, units) in &block.cohorts {
        if units.len() >= nd {
            return Err(Error::invalid(format!(
                "donor pool too small for placebo: {nd} donors, cohort at position {k} has {} units",
                units.len()
            )));
        }
    }
    let n_treated: usize = block.cohorts.values().map(|u| u.len()).sum();
    let disjoint = n_treated < nd;
    let donor_rows: Vec<&[f64]> = block.donors.iter().map(|&u| block.y[u].as_deref().unwrap()).collect();
    let reps = map_indexed(cfg.placebo_reps, cfg.threads, |r| -> Result<f64> {
        let mut rng = rng_for(cfg.seed, r as u64);
        let mut fits = Vec::with_capacity(block.cohorts.len());
        if disjoint {
            let order = sample(&mut rng, nd, n_treated).into_vec();
            let taken: BTreeSet<usize> = order.iter().copied().collect();
            let controls: Vec<&[f64]> = (0..nd).filter(|i| !taken.contains(i)).map(|i| donor_rows[i]).collect();
            let mut next = 0;
            for (&k, units) in &block.cohorts {
                let treated: Vec<&[f64]> = order[next..next + units.len()].iter().map(|&i| donor_rows[i]).collect();
                next += units.len();
                let f = fit_cohort(&treated, &controls, k, cfg)?;
                fits.push((f.tau, units.len() * (block.periods.len() - k)));
            }
        } else {
            for (&k, units) in &block.cohorts {
                let picked: BTreeSet<usize> = sample(&mut rng, nd, units.len()).into_iter().collect();
                let treated: Vec<&[f64]> = picked.iter().map(|&i| donor_rows[i]).collect();
                let controls: Vec<&[f64]> = (0..nd).filter(|i| !picked.contains(i)).map(|i| donor_rows[i]).collect();
                let f = fit_cohort(&treated, &controls, k, cfg)?;
                fits.push((f.tau, units.len() * (block.periods.len() - k)));
            }
        }
        Ok(pooled(&fits))
    });
    let taus: Vec<f64> = reps.into_iter().collect::<Result<_>>()?;
    let m = mean(&taus);
    Ok(((taus.iter().map(|t| (t - m).powi(2)).sum::<f64>() / taus.len() as f64).sqrt(), disjoint))
}

fn validate(cfg: &SdidConfig) -> Result<()> {
    if !(cfg.tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if cfg.zeta.is_some_and(|z| !(z >= 0.0)) {
        return Err(Error::invalid("zeta must be nonnegative"));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeasonalBalance {
    pub summer_share_pre: f64,
    pub summer_share_post: f64,
    pub imbalance_pp: f64,
    pub flagged: bool,
    /// Mean pre-period gap in summer months minus the mean gap in the other
    /// months, pooled over cohorts; positive when the synthetic control
    /// under-predicts summers.
    pub signed_seasonal_residual: Option<f64>,
}

pub const SEASONAL_FLAG_PP: f64 = 2.0;

/// Summer (April–September) shares of pre- and post-launch treated-unit
/// months in the window.
pub fn seasonal_balance_report(
    panel: &Panel,
    window: (PeriodId, PeriodId),
    fit: Option<&SdidResult>,
) -> Result<SeasonalBalance> {
    let (w0, w1) = window;
    if w0 >= w1 {
        return Err(Error::invalid("window must span at least two periods"));
    }
    let mut pre = [0usize; 2];
    let mut post = [0usize; 2];
    for u in 0..panel.n_units() {
        let Some(l) = panel.units()[u].launch else { continue };
        if l <= w0 || l > w1 {
            continue;
        }
        for p in panel.periods().iter().filter(|p| **p >= w0 && **p <= w1) {
            let bucket = if *p < l { &mut pre } else { &mut post };
            bucket[0] += 1;
            bucket[1] += usize::from(p.is_summer());
        }
    }
    if pre[0] == 0 || post[0] == 0 {
        return Err(Error::EmptySupport("no treated unit launches inside the window".into()));
    }
    let sp = 100.0 * pre[1] as f64 / pre[0] as f64;
    let sq = 100.0 * post[1] as f64 / post[0] as f64;
    let signed_seasonal_residual = fit.and_then(|r| {
        let mut parts = Vec::new();
        for c in &r.cohorts {
            let (mut s, mut w) = (Vec::new(), Vec::new());
            for (p, g) in c.pre_periods.iter().zip(&c.pre_gaps) {
                if p.is_summer() {
                    s.push(*g)
                } else {
                    w.push(*g)
                }
            }
            if !s.is_empty() && !w.is_empty() {
                parts.push((mean(&s) - mean(&w), c.n_treated_cells));
            }
        }
        (!parts.is_empty()).then(|| pooled(&parts))
    });
    Ok(SeasonalBalance {
        summer_share_pre: sp,
        summer_share_post: sq,
        imbalance_pp: sq - sp,
        flagged: (sq - sp).abs() > SEASONAL_FLAG_PP,
        signed_seasonal_residual,
    })
}
