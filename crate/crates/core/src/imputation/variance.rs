//! Leave-out cluster-robust variance for imputation estimands.
//!
//! The estimator is linear in the outcomes: treated cells carry their scheme
//! weight and untreated cells carry the implied weight through the fitted
//! fixed effects. Residuals for untreated cells are the FE residuals; for a
//! treated cell the residual is `τ̂_it` minus the cohort-by-period mean effect
//! of the other units, so a unit's own noise is not absorbed into its
//! reference effect.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{CellEffects, CohortMap, ImputationFit, ImputationSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaveOutRule {
    /// Borrow the reference effect from the nearest cohort in the same period,
    /// then the unit's own cohort over all periods, then all treated cells.
    #[default]
    MergeNearest,
    /// Give cells without a leave-out reference a zero residual.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceOptions {
    /// Exclude the focal unit from its reference effect. `false` gives the
    /// naive variant.
    pub leave_out: bool,
    pub singleton: LeaveOutRule,
    /// Student-t with `G − 1` degrees of freedom instead of the normal.
    pub t_inference: bool,
    /// Rescale each unit's untreated residuals by `(I − H_gg)^{-1/2}` (CR2)
    /// to undo the shrinkage of the fitted effects.
    pub cr2: bool,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions { leave_out: true, singleton: LeaveOutRule::MergeNearest, t_inference: false, cr2: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeReport {
    pub se: f64,
    pub variance: f64,
    /// Units contributing to the estimator.
    pub n_clusters: usize,
    pub fallbacks: usize,
    pub warnings: Vec<String>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn without(self, other: Acc) -> Option<f64> {
        (self.n > other.n).then(|| (self.sum - other.sum) / (self.n - other.n) as f64)
    }
}

pub fn leave_out_se(
    sample: &ImputationSample,
    fit: &ImputationFit,
    effects: &CellEffects,
    cohorts: &CohortMap,
    weights: &[f64],
    opts: &VarianceOptions,
) -> Result<SeReport> {
    let n_units = sample.panel.n_units();
    if weights.len() != effects.cells.len() {
        return Err(Error::invalid("weights do not align with cell effects"));
    }
    if cohorts.assignment.len() != n_units {
        return Err(Error::invalid("cohort map does not match the sample"));
    }
    let side = |u: usize| fit.sides.as_ref().map_or(0, |s| s[u].index());
    let mut cohort_of = Vec::with_capacity(effects.cells.len());
    for c in &effects.cells {
        let k = cohorts.cohort_of(c.unit).ok_or_else(|| {
            Error::invalid(format!("treated unit '{}' has no cohort", sample.panel.units()[c.unit].id))
        })?;
        cohort_of.push(k);
    }

    // (cohort, period, side), (cohort, side), (cohort, side, unit), side, (side, unit)
    let mut cps: BTreeMap<(usize, usize, usize), Acc> = BTreeMap::new();
    let mut cs: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    let mut csu: BTreeMap<(usize, usize, usize), Acc> = BTreeMap::new();
    let mut all = [Acc::default(); 2];
    let mut all_u: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    for (c, &k) in effects.cells.iter().zip(&cohort_of) {
        let s = side(c.unit);
        cps.entry((k, c.period, s)).or_default().add(c.tau);
        cs.entry((k, s)).or_default().add(c.tau);
        csu.entry((k, s, c.unit)).or_default().add(c.tau);
        all[s].add(c.tau);
        all_u.entry((s, c.unit)).or_default().add(c.tau);
    }

    let mut fallbacks = 0usize;
    let mut dropped = 0usize;
    let mut eps = vec![0.0; effects.cells.len()];
    for (j, (c, &k)) in effects.cells.iter().zip(&cohort_of).enumerate() {
        if weights[j] == 0.0 {
            continue;
        }
        let s = side(c.unit);
        let own = Acc { sum: c.tau, n: 1 };
        let here = cps[&(k, c.period, s)];
        let reference = if !opts.leave_out {
            Some(here.sum / here.n as f64)
        } else if let Some(m) = here.without(own) {
            Some(m)
        } else if opts.singleton == LeaveOutRule::Drop {
            dropped += 1;
            None
        } else {
            fallbacks += 1;
            let nearest = (0..cohorts.n_cohorts())
                .filter(|&o| o != k && cps.contains_key(&(o, c.period, s)))
                .min_by_key(|&o| ((cohorts.starts[o] - cohorts.starts[k]).abs(), std::cmp::Reverse(cohorts.starts[o])));
            let r = nearest
                .map(|o| {
                    let a = cps[&(o, c.period, s)];
                    a.sum / a.n as f64
                })
                .or_else(|| cs[&(k, s)].without(csu[&(k, s, c.unit)]))
                .or_else(|| all[s].without(all_u[&(s, c.unit)]));
            match r {
                Some(r) => Some(r),
                None => {
                    return Err(Error::estimation(format!(
                        "no other treated unit to form a leave-out reference for '{}'",
                        sample.panel.units()[c.unit].id
                    )))
                }
            }
        };
        eps[j] = reference.map_or(0.0, |r| c.tau - r);
    }

    let targets: Vec<_> = effects
        .cells
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(c, &w)| (fit.fe.row_key(c.unit, c.period), w))
        .collect();
    let v = fit.fe.absorber().implied_weights(&targets)?;

    let mut score = vec![0.0; n_units];
    let mut active = vec![false; n_units];
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_units];
    for (j, &(u, _)) in fit.cells.iter().enumerate() {
        active[u] |= v[j].abs() > 1e-14;
        rows_of[u].push(j);
    }
    let resid = &fit.fe.residuals;
    let mut determined = 0.0;
    if opts.cr2 {
        let lev = fit
            .leverage
            .get_or_init(|| Leverage::new(fit, &rows_of).map(std::sync::Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Estimation)?;
        let w = fit.fe.absorber().weights();
        let mut deficit = 0.0;
        for (u, eig) in lev.units.iter().zip(&lev.eig) {
            if !active[*u] {
                continue;
            }
            let rows = &rows_of[*u];
            let (adj, lost) = eig.apply(rows.iter().map(|&j| (resid[j], w[j], v[j])));
            score[*u] += rows.iter().zip(adj).map(|(&j, r)| v[j] * r).sum::<f64>();
            deficit += lost;
        }
        // directions fixed exactly by the fit carry no residual, so their
        // share is filled in from the pooled residual variance
        if let Some(s2) = lev.sigma2 {
            determined = deficit * s2;
        }
    } else {
        for (j, &(u, _)) in fit.cells.iter().enumerate() {
            score[u] += v[j] * resid[j];
        }
    }
    for (j, c) in effects.cells.iter().enumerate() {
        score[c.unit] += weights[j] * eps[j];
        active[c.unit] |= weights[j] != 0.0;
    }
    let variance: f64 = score.iter().map(|s| s * s).sum::<f64>() + determined;
    if !variance.is_finite() || variance < 0.0 {
        return Err(Error::estimation(format!("invalid variance {variance}")));
    }
    let mut warnings = Vec::new();
    if fallbacks > 0 {
        warnings.push(format!("{fallbacks} treated cells used a fallback leave-out reference"));
    }
    if dropped > 0 {
        warnings.push(format!("{dropped} treated cells without a leave-out reference got a zero residual"));
    }
    Ok(SeReport {
        se: variance.sqrt(),
        variance,
        n_clusters: active.iter().filter(|&&a| a).count(),
        fallbacks,
        warnings,
    })
}

/// Per-unit spectral data of `I − H_gg` for the untreated fit, shared by
/// every estimand evaluated on it.
#[derive(Debug)]
pub(crate) struct Leverage {
    units: Vec<usize>,
    eig: Vec<ClusterEigen>,
    /// Pooled residual variance; `None` without residual degrees of freedom.
    sigma2: Option<f64>,
}

impl Leverage {
    fn new(fit: &ImputationFit, rows_of: &[Vec<usize>]) -> Result<Self> {
        let units: Vec<usize> = (0..rows_of.len()).filter(|&u| !rows_of[u].is_empty()).collect();
        let groups: Vec<Vec<usize>> = units.iter().map(|&u| rows_of[u].clone()).collect();
        let absorber = fit.fe.absorber();
        let blocks = absorber.hat_blocks(&groups)?;
        let trace: f64 = blocks.iter().map(|h| h.trace()).sum();
        let w = absorber.weights();
        let resid = &fit.fe.residuals;
        let ssr: f64 = resid.iter().zip(w).map(|(r, w)| w * r * r).sum();
        let df = resid.len() as f64 - trace;
        let eig = blocks.into_iter().map(ClusterEigen::new).collect();
        Ok(Leverage { units, eig, sigma2: (df > 0.5).then(|| ssr / df) })
    }
}

#[derive(Debug)]
struct ClusterEigen {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl ClusterEigen {
    fn new(h: DMatrix<f64>) -> Self {
        let n = h.nrows();
        let eig = (DMatrix::identity(n, n) - h).symmetric_eigen();
        ClusterEigen { q: eig.eigenvectors, lambda: eig.eigenvalues }
    }

    /// `W^{-1/2} (I − H)^{-1/2} W^{1/2} r`, with a pseudo-inverse root on
    /// directions the fit reproduces exactly, and the squared mass of
    /// `W^{-1/2} v` on those directions.
    fn apply(&self, rows: impl Iterator<Item = (f64, f64, f64)>) -> (Vec<f64>, f64) {
        let n = self.lambda.len();
        let mut rs = DVector::zeros(n);
        let mut vs = DVector::zeros(n);
        let mut sw = vec![0.0; n];
        for (k, (r, w, v)) in rows.enumerate() {
            sw[k] = w.sqrt();
            rs[k] = r * sw[k];
            vs[k] = v / sw[k];
        }
        let mut c = self.q.tr_mul(&rs);
        let proj = self.q.tr_mul(&vs);
        let mut lost = 0.0;
        for k in 0..n {
            let l = self.lambda[k];
            if l > 1e-8 {
                c[k] /= l.sqrt();
            } else {
                c[k] = 0.0;
                lost += proj[k] * proj[k];
            }
        }
        let adj = &self.q * c;
        (adj.iter().zip(&sw).map(|(a, s)| a / s).collect(), lost)
    }
}
