//! Monte Carlo evaluation of estimators on simulated panels.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dgp::{generate_rep, DgpConfig, Truth};
use crate::classic::{twfe_dd, ExtraFe, TwfeOutcome};
use crate::error::{Error, Result};
use crate::fe::FeMethod;
use crate::imputation::{
    build_cohorts, default_rules, estimate_scheme, heterogeneity, placebo_panel, prepare_sample, EffectEstimate,
    Granularity, PipelineOptions, WeightScheme, Z_95,
};
use crate::panel::{country_median_split, Panel, Side};
use crate::par::map_indexed;
use crate::sdid::{sdid_estimate, SdidConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Imputation {
        scheme: String,
        #[serde(default)]
        pipeline: PipelineOptions,
    },
    Twfe {
        #[serde(default)]
        country_year: bool,
    },
    /// Above-minus-below contrast of `scheme` on a within-country median split.
    Heterogeneity {
        attribute: String,
        scheme: String,
        #[serde(default = "half_year_pipeline")]
        pipeline: PipelineOptions,
    },
    /// Imputation estimate on a registry shifted `shift` months into the past.
    Placebo {
        shift: i64,
        scheme: String,
        #[serde(default)]
        pipeline: PipelineOptions,
    },
    /// Window given as inclusive period positions.
    Sdid {
        window: (usize, usize),
        #[serde(default)]
        config: SdidConfig,
    },
}

fn half_year_pipeline() -> PipelineOptions {
    PipelineOptions { granularity: Granularity::HalfYear, ..Default::default() }
}

impl EstimatorSpec {
    pub fn id(&self) -> String {
        match self {
            EstimatorSpec::Imputation { scheme, .. } => format!("imputation:{scheme}"),
            EstimatorSpec::Twfe { country_year: false } => "twfe".into(),
            EstimatorSpec::Twfe { country_year: true } => "twfe_country_year".into(),
            EstimatorSpec::Heterogeneity { attribute, scheme, .. } => format!("heterogeneity:{attribute}:{scheme}"),
            EstimatorSpec::Placebo { shift, scheme, .. } => format!("placebo{shift}:{scheme}"),
            EstimatorSpec::Sdid { .. } => "sdid".into(),
        }
    }

    fn scheme(name: &str) -> Result<WeightScheme> {
        WeightScheme::by_name(name).ok_or_else(|| Error::invalid(format!("unknown weight scheme '{name}'")))
    }

    /// Estimate and the true value it targets.
    pub fn run(&self, panel: &Panel, truth: &Truth) -> Result<(EffectEstimate, f64)> {
        match self {
            EstimatorSpec::Imputation { scheme, pipeline } => {
                let s = Self::scheme(scheme)?;
                let est = estimate_scheme(panel, pipeline, &s)?;
                let target = truth_on(panel, panel, truth, &s, None)?;
                Ok((est, target))
            }
            EstimatorSpec::Twfe { country_year } => {
                let extra = if *country_year { ExtraFe::CountryYear } else { ExtraFe::None };
                let r = twfe_dd(panel, extra, TwfeOutcome::Log, FeMethod::Auto)?;
                let target = truth_on(panel, panel, truth, &WeightScheme::all_post(), None)?;
                Ok((r.estimate, target))
            }
            EstimatorSpec::Heterogeneity { attribute, scheme, pipeline } => {
                let base = Self::scheme(scheme)?;
                let sample = prepare_sample(panel, &pipeline.sample())?;
                let groups = country_median_split(&sample.panel, attribute)?;
                let cohorts = build_cohorts(&sample.panel, pipeline.granularity, &default_rules(pipeline.granularity));
                let r = heterogeneity(&sample, &groups, &base, &cohorts, FeMethod::Auto, &pipeline.variance())?;
                let contrast = WeightScheme::by_name("contrast").unwrap();
                let target = truth_on(&sample.panel, panel, truth, &contrast, Some(&groups.side))?;
                Ok((r.contrast, target))
            }
            EstimatorSpec::Placebo { shift, scheme, pipeline } => {
                let p = placebo_panel(panel, *shift)?;
                let est = estimate_scheme(&p, pipeline, &Self::scheme(scheme)?)?;
                Ok((est, 0.0))
            }
            EstimatorSpec::Sdid { window, config } => {
                let periods = panel.periods();
                if window.0 > window.1 || window.1 >= periods.len() {
                    return Err(Error::invalid("SDID window outside the panel"));
                }
                let mut cfg = config.clone();
                cfg.window = Some((periods[window.0], periods[window.1]));
                // placebo draws stay single-threaded inside a replication
                cfg.threads = Some(1);
                let r = sdid_estimate(panel, &cfg)?;
                let mut num = 0.0;
                let mut den = 0.0;
                for c in &r.cohorts {
                    let a = panel.period_index(&c.adoption).unwrap();
                    for id in &c.treated_units {
                        let u = panel.unit_index(id).unwrap();
                        for t in a..=window.1 {
                            if cfg.drop_months.contains(&periods[t].month.unwrap_or(0)) {
                                continue;
                            }
                            num += truth.tau(u, t);
                            den += 1.0;
                        }
                    }
                }
                let target = if den > 0.0 { num / den } else { f64::NAN };
                Ok((r.to_estimate(), target))
            }
        }
    }
}

/// True value of `scheme` over the identified treated cells of `sub`, a unit
/// subset of the simulated `full` panel. A treated cell is identified when
/// its period (within its side, for split fits) has an untreated cell.
fn truth_on(sub: &Panel, full: &Panel, truth: &Truth, scheme: &WeightScheme, sides: Option<&[Side]>) -> Result<f64> {
    let map: Vec<usize> = sub.units().iter().map(|u| full.unit_index(&u.id).unwrap()).collect();
    let side = |u: usize| sides.map_or(0, |s| s[u].index());
    let mut control = vec![[false; 2]; sub.n_periods()];
    for (u, t, _) in sub.cells() {
        if !sub.is_treated(u, t) {
            control[t][side(u)] = true;
        }
    }
    let mut eff = crate::imputation::CellEffects::default();
    for (u, t, _) in sub.cells() {
        if sub.is_treated(u, t) && control[t][side(u)] {
            eff.cells.push(crate::imputation::TreatedCell {
                unit: u,
                period: t,
                event_time: sub.event_time(u, t).unwrap(),
                tau: truth.tau(map[u], t),
            });
        }
    }
    let w = scheme.weights(sub, &eff, sides)?;
    crate::imputation::aggregate(&eff, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McDraw {
    pub rep: usize,
    pub estimate: f64,
    pub se: f64,
    pub truth: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub estimator: String,
    pub reps: usize,
    pub completed: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Empirical standard deviation with divisor `n`, so that
    /// `rmse² = bias² + sd²` when the truth is constant.
    pub sd: f64,
    pub mean_se: f64,
    pub coverage_95: f64,
    pub rejection_5: f64,
    pub aborted: bool,
    #[serde(skip)]
    pub runtime_secs: f64,
    #[serde(skip)]
    pub draws: Vec<McDraw>,
    #[serde(skip)]
    pub failure_messages: Vec<String>,
}

impl McReport {
    fn from_draws(
        estimator: String,
        reps: usize,
        draws: Vec<McDraw>,
        failure_messages: Vec<String>,
        aborted: bool,
    ) -> Self {
        let n = draws.len() as f64;
        let mean =
            |f: &dyn Fn(&McDraw) -> f64| if draws.is_empty() { f64::NAN } else { draws.iter().map(f).sum::<f64>() / n };
        let mean_estimate = mean(&|d| d.estimate);
        let mean_truth = mean(&|d| d.truth);
        let bias = mean(&|d| d.estimate - d.truth);
        let rmse = mean(&|d| (d.estimate - d.truth).powi(2)).sqrt();
        let sd = mean(&|d| (d.estimate - d.truth - bias).powi(2)).sqrt();
        let mean_se = mean(&|d| d.se);
        let coverage_95 = mean(&|d| f64::from(u8::from((d.estimate - d.truth).abs() <= Z_95 * d.se)));
        let rejection_5 = mean(&|d| f64::from(u8::from(d.p_value < 0.05)));
        McReport {
            estimator,
            reps,
            completed: draws.len(),
            failures: failure_messages.len(),
            mean_estimate,
            mean_truth,
            bias,
            rmse,
            sd,
            mean_se,
            coverage_95,
            rejection_5,
            aborted,
            runtime_secs: 0.0,
            draws,
            failure_messages,
        }
    }

    pub fn draw(&self, rep: usize) -> Option<&McDraw> {
        self.draws.iter().find(|d| d.rep == rep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    pub reps: usize,
    /// Stop once failures exceed this share of the planned replications.
    pub max_failure_rate: f64,
    /// Replications run between failure checks. Fixed, so that where a run
    /// stops never depends on the thread count.
    pub chunk: usize,
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { reps: 200, max_failure_rate: 0.1, chunk: 50, threads: None }
    }
}

/// Runs every estimator on the same simulated panel in each replication;
/// replication `r` uses stream `r` of `config.seed`.
pub fn monte_carlo(specs: &[EstimatorSpec], config: &DgpConfig, opts: &McOptions) -> Result<Vec<McReport>> {
    if opts.reps < 2 {
        return Err(Error::invalid("Monte Carlo needs at least 2 replications"));
    }
    if specs.is_empty() {
        return Err(Error::invalid("no estimators given"));
    }
    config.validate()?;
    let started = Instant::now();
    let chunk = opts.chunk.max(1);
    let limit = opts.max_failure_rate * opts.reps as f64;
    let mut draws: Vec<Vec<McDraw>> = vec![Vec::new(); specs.len()];
    let mut failures: Vec<Vec<String>> = vec![Vec::new(); specs.len()];
    let mut aborted = false;
    let mut done = 0;
    while done < opts.reps && !aborted {
        let n = chunk.min(opts.reps - done);
        let results = map_indexed(n, opts.threads, |k| {
            let rep = done + k;
            match generate_rep(config, rep as u64) {
                Ok((panel, truth)) => specs
                    .iter()
                    .map(|s| {
                        s.run(&panel, &truth).map(|(e, t)| McDraw {
                            rep,
                            estimate: e.tau_hat,
                            se: e.se,
                            truth: t,
                            p_value: e.p_value,
                        })
                    })
                    .collect::<Vec<_>>(),
                Err(e) => specs.iter().map(|_| Err(Error::estimation(format!("generation failed: {e}")))).collect(),
            }
        });
        for (k, row) in results.into_iter().enumerate() {
            for (j, r) in row.into_iter().enumerate() {
                match r {
                    Ok(d) => draws[j].push(d),
                    Err(e) => failures[j].push(format!("rep {}: {e}", done + k)),
                }
            }
        }
        done += n;
        aborted = failures.iter().any(|f| f.len() as f64 > limit);
    }
    let runtime = started.elapsed().as_secs_f64();
    Ok(specs
        .iter()
        .zip(draws.into_iter().zip(failures))
        .map(|(s, (d, f))| {
            let mut r = McReport::from_draws(s.id(), opts.reps, d, f, aborted);
            r.runtime_secs = runtime;
            r
        })
        .collect())
}
