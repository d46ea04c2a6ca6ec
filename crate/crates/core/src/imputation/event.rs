//! Event-time profile: imputed post-launch effects by months since launch
//! and lead coefficients estimated on untreated cells.

use serde::Serialize;

use super::{inference, CohortMap, Imputation, SchemeKind, VarianceOptions, WeightScheme};
use crate::error::{Error, Result};
use crate::fe::{absorbed_ols, cluster_robust_vcov, DesignMatrix};

#[derive(Debug, Clone, Copy)]
pub struct EventStudyOptions {
    pub h_pre: i64,
    pub h_post: i64,
    pub variance: VarianceOptions,
}

impl Default for EventStudyOptions {
    fn default() -> Self {
        EventStudyOptions { h_pre: 12, h_post: 18, variance: VarianceOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventPoint {
    pub h: i64,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_cells: usize,
}

impl EventPoint {
    fn new(h: i64, estimate: f64, se: f64, crit: f64, n_cells: usize) -> Self {
        EventPoint { h, estimate, se, ci_low: estimate - crit * se, ci_high: estimate + crit * se, n_cells }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EventStudyProfile {
    pub pre: Vec<EventPoint>,
    pub post: Vec<EventPoint>,
    /// Effects beyond `h_post`, pooled. Reported with `h = h_post + 1`.
    pub pooled_tail: Option<EventPoint>,
    pub reference: String,
    pub notices: Vec<String>,
}

impl EventStudyProfile {
    pub fn points(&self) -> impl Iterator<Item = &EventPoint> {
        self.pre.iter().chain(&self.post).chain(&self.pooled_tail)
    }
}

pub fn event_study(imp: &Imputation<'_>, cohorts: &CohortMap, opts: &EventStudyOptions) -> Result<EventStudyProfile> {
    if opts.h_pre < 0 || opts.h_post < 0 {
        return Err(Error::invalid("event window bounds must be nonnegative"));
    }
    let mut notices = Vec::new();
    let panel = &imp.sample.panel;

    // leads on untreated cells, fixed effects absorbed, clustered by unit
    let mut pre = Vec::new();
    if opts.h_pre > 0 {
        let rows = &imp.fit.cells;
        let names: Vec<String> = (1..=opts.h_pre).map(|k| format!("lead{k}")).collect();
        let columns: Vec<Vec<f64>> = (1..=opts.h_pre)
            .map(|k| rows.iter().map(|&(u, t)| f64::from(u8::from(panel.event_time(u, t) == Some(-k)))).collect())
            .collect();
        let y: Vec<f64> = rows.iter().map(|&(u, t)| *imp.sample.y.get(u, t).unwrap()).collect();
        let clusters: Vec<usize> = rows.iter().map(|&(u, _)| u).collect();
        let x = DesignMatrix::new(names, columns, clusters, vec![1.0; rows.len()])?;
        let (fit, tilde, _) = absorbed_ols(imp.fit.fe.absorber(), &x, &y)?;
        let kept = fit.kept();
        if !kept.is_empty() {
            let vc = cluster_robust_vcov(&tilde.select(&kept), &fit.residuals)?;
            let df = opts.variance.t_inference.then_some(vc.n_clusters as f64 - 1.0);
            for (pos, &k) in kept.iter().enumerate() {
                let b = fit.coefficients[k].unwrap();
                let se = vc.se(pos);
                let (crit, _) = inference(b, se, df);
                let n = x.columns[k].iter().filter(|&&v| v > 0.0).count();
                pre.push(EventPoint::new(-(k as i64) - 1, b, se, crit, n));
            }
        }
        for name in &fit.dropped {
            notices.push(format!("{name} not identified; omitted"));
        }
        pre.sort_by_key(|p| p.h);
    }

    let mut post = Vec::new();
    for h in 0..=opts.h_post {
        match point(imp, cohorts, &WeightScheme::event_time(h), h, &opts.variance) {
            Ok(p) => post.push(p),
            Err(Error::EmptySupport(_)) => notices.push(format!("no treated cells at h = {h}; omitted")),
            Err(e) => return Err(e),
        }
    }
    let tail = WeightScheme::new(format!("h>{}", opts.h_post), SchemeKind::EventTimeFrom(opts.h_post + 1));
    let pooled_tail = match point(imp, cohorts, &tail, opts.h_post + 1, &opts.variance) {
        Ok(p) => Some(p),
        Err(Error::EmptySupport(_)) => {
            notices.push(format!("no treated cells beyond h = {}", opts.h_post));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EventStudyProfile {
        pre,
        post,
        pooled_tail,
        reference: format!(
            "leads estimated on untreated cells relative to h < -{} and never-treated cells",
            opts.h_pre
        ),
        notices,
    })
}

fn point(
    imp: &Imputation<'_>,
    cohorts: &CohortMap,
    s: &WeightScheme,
    h: i64,
    v: &VarianceOptions,
) -> Result<EventPoint> {
    let e = imp.estimate(s, cohorts, v)?;
    let df = v.t_inference.then_some(e.n_units as f64 - 1.0);
    let (crit, _) = inference(e.tau_hat, e.se, df);
    Ok(EventPoint::new(h, e.tau_hat, e.se, crit, e.n_treated_cells))
}
