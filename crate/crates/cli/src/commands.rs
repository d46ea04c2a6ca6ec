use std::path::{Path, PathBuf};

use serde::Serialize;
use stagger_core::classic::{
    annual_dd, iv_dd, launch_timing_regression, neighbor_launch_regression, pretrend_launch_regression, twfe_dd,
    CoefTable, ExtraFe, IvInstrumentSet, IvMargin, NeighborWindow, TimeDriver, TwfeOutcome,
};
use stagger_core::fe::FeMethod;
use stagger_core::imputation::{
    build_cohorts, default_rules, estimate_scheme, event_study, heterogeneity, placebo_event_study, prepare_sample,
    EffectEstimate, EventPoint, Granularity, Imputation, PipelineOptions, WeightScheme,
};
use stagger_core::panel::{
    aggregate_annual, apply_zero_policy, country_median_split, load_panel, log_outcome, moving_average,
    write_firms_csv, write_panel_csv, write_units_csv, Panel,
};
use stagger_core::sdid::{sdid_estimate, seasonal_balance_report};
use stagger_core::simlab::{generate, monte_carlo};

use crate::args::{Cli, Command, Common, Format, Input, Preset};
use crate::config::{self, RunConfig};
use crate::cost::cost_projection;
use crate::output::{csv_bytes, emit, ensure_dir, with_temp, write_atomic};
use crate::{CliError, CliResult};

pub const EVENT_STUDY_HEADER: [&str; 5] = ["h", "estimate", "se", "ci_low", "ci_high"];

pub fn dispatch(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    match &cli.command {
        Command::Estimate { input, presets, common } => estimate(input, presets, common),
        Command::EventStudy { input, preset, common } => event_study_cmd(input, *preset, common),
        Command::Placebo { input, shifts, preset, common } => placebo(input, shifts, *preset, common),
        Command::Heterogeneity { input, attributes, preset, common } => hetero(input, attributes, *preset, common),
        Command::Sdid { input, from, to, placebo_reps, common } => sdid(input, (*from, *to), *placebo_reps, common),
        Command::Classic { input, attributes, common } => classic(input, attributes, common),
        Command::Seasonality { input, common } => seasonality(input, common),
        Command::CostProjection { effect_pct, baseline, cost, common } => {
            let c = cost_projection(*effect_pct, *baseline, *cost)?;
            println!("monthly {:.2}  annual {:.2}", c.monthly_cost, c.annual_cost);
            ensure_dir(&common.out)?;
            Ok(vec![emit(&common.out, "cost_projection", &[c], common.format)?])
        }
        Command::Simulate { common } => simulate(common),
        Command::Montecarlo { reps, common } => montecarlo(*reps, common),
    }
}

fn setup(common: &Common) -> CliResult<RunConfig> {
    let cfg = config::load(common.config.as_deref())?;
    if common.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    ensure_dir(&common.out)?;
    Ok(cfg)
}

fn load(input: &Input, cfg: &RunConfig) -> CliResult<Panel> {
    for p in [Some(&input.units), Some(&input.panel), input.firms.as_ref()].into_iter().flatten() {
        if !p.exists() {
            return Err(CliError::MissingFile(p.clone()));
        }
    }
    let (panel, report) = load_panel(&input.units, &input.panel, input.firms.as_deref(), &cfg.load.options())?;
    for c in &report.coverage {
        eprintln!("{}: {} units, {} cells, {} missing", c.country, c.units, c.cells, c.missing);
    }
    Ok(apply_zero_policy(&panel, cfg.zero_policy)?)
}

fn pipeline(cfg: &RunConfig, common: &Common, preset: Preset) -> PipelineOptions {
    let mut p = cfg.pipeline;
    if let Some(g) = common.cohorts {
        p.granularity = g;
    }
    p.include_never = preset.include_never();
    p
}

fn monthly_scheme(preset: Preset) -> CliResult<WeightScheme> {
    preset
        .scheme()
        .and_then(WeightScheme::by_name)
        .ok_or_else(|| CliError::Usage(format!("preset {} needs monthly data; use `estimate`", preset.name())))
}

#[derive(Debug, Serialize)]
struct EstimateRow<'a> {
    preset: &'a str,
    tau_hat: f64,
    se: f64,
    semi_elasticity_pct: f64,
    semi_elasticity_se_pct: f64,
    ci95_low_pct: f64,
    ci95_high_pct: f64,
    p_value: f64,
    n_treated_cells: usize,
    n_total_cells: usize,
    n_units: usize,
}

impl<'a> EstimateRow<'a> {
    fn new(preset: &'a str, e: &EffectEstimate) -> Self {
        EstimateRow {
            preset,
            tau_hat: e.tau_hat,
            se: e.se,
            semi_elasticity_pct: e.semi_elasticity_pct,
            semi_elasticity_se_pct: e.semi_elasticity_se_pct,
            ci95_low_pct: e.ci95_low_pct,
            ci95_high_pct: e.ci95_high_pct,
            p_value: e.p_value,
            n_treated_cells: e.n_treated_cells,
            n_total_cells: e.n_total_cells,
            n_units: e.n_units,
        }
    }
}

fn estimate(input: &Input, presets: &[Preset], common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let mut estimates = Vec::new();
    for &preset in presets {
        let e = if preset.is_annual() {
            let a = &cfg.annual;
            let two = aggregate_annual(&panel, a.pre_year, a.post_year, &a.rule(preset.include_never()))?;
            annual_dd(&two)?
        } else {
            estimate_scheme(&panel, &pipeline(&cfg, common, preset), &monthly_scheme(preset)?)?
        };
        println!(
            "{:<20} {:>8.2}% (se {:.2})  tau {:.4}  p {:.3}",
            preset.name(),
            e.semi_elasticity_pct,
            e.semi_elasticity_se_pct,
            e.tau_hat,
            e.p_value
        );
        estimates.push((preset, e));
    }
    let rows: Vec<EstimateRow> = estimates.iter().map(|(p, e)| EstimateRow::new(p.name(), e)).collect();
    Ok(vec![emit(&common.out, "estimates", &rows, common.format)?])
}

#[derive(Debug, Serialize)]
struct EventRow {
    h: i64,
    estimate: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
}

impl From<&EventPoint> for EventRow {
    fn from(p: &EventPoint) -> Self {
        EventRow { h: p.h, estimate: p.estimate, se: p.se, ci_low: p.ci_low, ci_high: p.ci_high }
    }
}

fn emit_events(dir: &Path, stem: &str, points: &[EventRow], format: Format) -> CliResult<PathBuf> {
    match format {
        Format::Csv => write_atomic(dir, &format!("{stem}.csv"), &csv_bytes(points, Some(&EVENT_STUDY_HEADER))?),
        Format::Json => emit(dir, stem, points, format),
    }
}

fn event_study_cmd(input: &Input, preset: Preset, common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let opts = pipeline(&cfg, common, preset);
    let sample = prepare_sample(&panel, &opts.sample())?;
    let cohorts = build_cohorts(&sample.panel, opts.granularity, &default_rules(opts.granularity));
    let imp = Imputation::new(&sample, None, opts.unit_trends, FeMethod::Auto)?;
    let profile = event_study(&imp, &cohorts, &cfg.event_study.options(opts.variance()))?;
    for n in sample.notices.iter().chain(&profile.notices) {
        eprintln!("note: {n}");
    }
    let rows: Vec<EventRow> = profile.points().map(EventRow::from).collect();
    Ok(vec![emit_events(&common.out, "event_study", &rows, common.format)?])
}

#[derive(Debug, Serialize)]
struct PlaceboSummary {
    shift: i64,
    n_coefficients: usize,
    n_significant: usize,
    share_significant: f64,
    passes: bool,
}

fn placebo(input: &Input, shifts: &[i64], preset: Preset, common: &Common) -> CliResult<Vec<PathBuf>> {
    if let Some(bad) = shifts.iter().find(|&&s| s <= 0) {
        return Err(CliError::Usage(format!(
            "placebo shifts are months into the past and must be positive, got {bad}"
        )));
    }
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let opts = pipeline(&cfg, common, preset);
    let ev = cfg.event_study.options(opts.variance());
    let mut written = Vec::new();
    let mut summary = Vec::new();
    for &k in shifts {
        let run = placebo_event_study(&panel, k, &opts.sample(), opts.granularity, &ev)?;
        let rows: Vec<EventRow> = run.points.iter().map(EventRow::from).collect();
        written.push(emit_events(&common.out, &format!("placebo_{k}"), &rows, common.format)?);
        println!(
            "shift {k}: {}/{} significant ({:.1}%) {}",
            run.n_significant,
            run.points.len(),
            100.0 * run.share_significant,
            if run.passes() { "pass" } else { "FAIL" }
        );
        summary.push(PlaceboSummary {
            shift: k,
            n_coefficients: run.points.len(),
            n_significant: run.n_significant,
            share_significant: run.share_significant,
            passes: run.passes(),
        });
    }
    written.push(emit(&common.out, "placebo_summary", &summary, common.format)?);
    Ok(written)
}

#[derive(Debug, Serialize)]
struct HeteroRow<'a> {
    attribute: &'a str,
    side: &'static str,
    tau_hat: f64,
    se: f64,
    semi_elasticity_pct: f64,
    p_value: f64,
    n_treated_cells: usize,
    n_units: usize,
}

fn hetero(input: &Input, attributes: &[String], preset: Preset, common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let mut opts = pipeline(&cfg, common, preset);
    if common.cohorts.is_none() {
        opts.granularity = Granularity::HalfYear;
    }
    let base = monthly_scheme(preset)?;
    let sample = prepare_sample(&panel, &opts.sample())?;
    let cohorts = build_cohorts(&sample.panel, opts.granularity, &default_rules(opts.granularity));
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for a in attributes {
        let groups = country_median_split(&sample.panel, a)?;
        let r = heterogeneity(&sample, &groups, &base, &cohorts, FeMethod::Auto, &opts.variance())?;
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        println!(
            "{a}: above {:.2}%  below {:.2}%  difference p = {:.3}",
            r.above.semi_elasticity_pct, r.below.semi_elasticity_pct, r.contrast_p
        );
        results.push(r);
    }
    for r in &results {
        let units = [r.n_above_units, r.n_below_units, r.n_above_units + r.n_below_units];
        for ((side, e), n) in
            [("above", &r.above), ("below", &r.below), ("contrast", &r.contrast)].into_iter().zip(units)
        {
            rows.push(HeteroRow {
                attribute: &r.attribute,
                side,
                tau_hat: e.tau_hat,
                se: e.se,
                semi_elasticity_pct: e.semi_elasticity_pct,
                p_value: e.p_value,
                n_treated_cells: e.n_treated_cells,
                n_units: n,
            });
        }
    }
    Ok(vec![emit(&common.out, "heterogeneity", &rows, common.format)?])
}

#[derive(Debug, Serialize)]
struct SdidRow {
    cohort: String,
    n_treated_units: usize,
    n_donors: usize,
    n_post_periods: Option<usize>,
    n_treated_cells: usize,
    tau: f64,
    se: Option<f64>,
    mspe: f64,
    zeta: Option<f64>,
}

#[derive(Debug, Serialize)]
struct WeightRow {
    cohort: String,
    kind: &'static str,
    key: String,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct BalanceRow {
    summer_share_pre: f64,
    summer_share_post: f64,
    imbalance_pp: f64,
    flagged: bool,
    signed_seasonal_residual: Option<f64>,
}

fn sdid(
    input: &Input,
    window: (Option<stagger_core::PeriodId>, Option<stagger_core::PeriodId>),
    placebo_reps: Option<usize>,
    common: &Common,
) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let mut sc = cfg.sdid.clone();
    let periods = panel.periods();
    let (first, last) = (periods[0], periods[periods.len() - 1]);
    let (w0, w1) = sc.window.unwrap_or((first, last));
    let w = (window.0.unwrap_or(w0), window.1.unwrap_or(w1));
    sc.window = Some(w);
    if let Some(r) = placebo_reps {
        sc.placebo_reps = r;
    }
    if let Some(s) = common.seed {
        sc.seed = s;
    }
    sc.threads = common.threads;
    let r = sdid_estimate(&panel, &sc)?;
    for warning in &r.warnings {
        eprintln!("warning: {warning}");
    }
    let mut rows: Vec<SdidRow> = r
        .cohorts
        .iter()
        .map(|c| SdidRow {
            cohort: c.adoption.to_string(),
            n_treated_units: c.treated_units.len(),
            n_donors: c.donors.len(),
            n_post_periods: Some(c.n_post_periods),
            n_treated_cells: c.n_treated_cells,
            tau: c.tau,
            se: None,
            mspe: c.mspe,
            zeta: Some(c.zeta),
        })
        .collect();
    rows.push(SdidRow {
        cohort: "pooled".into(),
        n_treated_units: r.cohorts.iter().map(|c| c.treated_units.len()).sum(),
        n_donors: r.n_donors,
        n_post_periods: None,
        n_treated_cells: r.cohorts.iter().map(|c| c.n_treated_cells).sum(),
        tau: r.tau_pooled,
        se: r.se_placebo,
        mspe: r.mspe_monthly,
        zeta: None,
    });
    let est = r.to_estimate();
    println!(
        "sdid {:.2}% (se {:.2})  tau {:.4}  mspe {:.5}",
        est.semi_elasticity_pct, est.semi_elasticity_se_pct, r.tau_pooled, r.mspe_monthly
    );
    let mut weights = Vec::new();
    for c in &r.cohorts {
        let cohort = c.adoption.to_string();
        for (d, om) in c.donors.iter().zip(&c.omega) {
            weights.push(WeightRow { cohort: cohort.clone(), kind: "unit", key: d.clone(), weight: *om });
        }
        for (p, l) in c.pre_periods.iter().zip(&c.lambda) {
            weights.push(WeightRow { cohort: cohort.clone(), kind: "time", key: p.to_string(), weight: *l });
        }
    }
    let b = seasonal_balance_report(&panel, w, Some(&r))?;
    let balance = BalanceRow {
        summer_share_pre: b.summer_share_pre,
        summer_share_post: b.summer_share_post,
        imbalance_pp: b.imbalance_pp,
        flagged: b.flagged,
        signed_seasonal_residual: b.signed_seasonal_residual,
    };
    Ok(vec![
        emit(&common.out, "sdid", &rows, common.format)?,
        emit(&common.out, "sdid_weights", &weights, common.format)?,
        emit(&common.out, "sdid_seasonal_balance", &[balance], common.format)?,
    ])
}

#[derive(Debug, Serialize)]
struct ClassicRow {
    model: String,
    term: String,
    estimate: f64,
    se: Option<f64>,
    p_value: Option<f64>,
    n_obs: usize,
}

fn classic(input: &Input, attributes: &[String], common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let mut rows = Vec::new();
    let effect_row = |model: &str, e: &EffectEstimate| ClassicRow {
        model: model.into(),
        term: "treated".into(),
        estimate: e.tau_hat,
        se: Some(e.se),
        p_value: Some(e.p_value),
        n_obs: e.n_total_cells,
    };
    for (model, extra, outcome) in [
        ("twfe_ols", ExtraFe::None, TwfeOutcome::Log),
        ("twfe_ols_country_year", ExtraFe::CountryYear, TwfeOutcome::Log),
        ("twfe_ppml", ExtraFe::None, TwfeOutcome::CountsPpml),
        ("twfe_ppml_country_year", ExtraFe::CountryYear, TwfeOutcome::CountsPpml),
    ] {
        let r = twfe_dd(&panel, extra, outcome, FeMethod::Auto)?;
        for n in &r.notes {
            eprintln!("{model}: {n}");
        }
        rows.push(effect_row(model, &r.estimate));
    }
    let table_rows = |model: &str, t: &CoefTable| -> Vec<ClassicRow> {
        t.rows
            .iter()
            .map(|r| ClassicRow {
                model: model.into(),
                term: r.term.clone(),
                estimate: r.estimate,
                se: Some(r.se),
                p_value: Some(r.p_value),
                n_obs: t.n_obs,
            })
            .collect()
    };
    let diagnostics = [
        ("launch_timing", launch_timing_regression(&panel)),
        ("pretrend_launch", pretrend_launch_regression(&panel, 12)),
        ("neighbor_launch", neighbor_launch_regression(&panel, NeighborWindow::default())),
    ];
    for (model, t) in diagnostics {
        match t {
            Ok(t) => rows.extend(table_rows(model, &t)),
            Err(e) => eprintln!("{model} skipped: {e}"),
        }
    }
    if !attributes.is_empty() {
        let spec = IvInstrumentSet { base_attributes: attributes.to_vec(), time_driver: TimeDriver::AnyNationalLaunch };
        let r = iv_dd(&panel, &spec, ExtraFe::None, IvMargin::Binary)?;
        for w in &r.warnings {
            eprintln!("iv_2sls: {w}");
        }
        rows.push(effect_row("iv_2sls", &r.estimate));
        rows.push(ClassicRow {
            model: "iv_2sls".into(),
            term: "first_stage_f".into(),
            estimate: r.first_stage_f,
            se: None,
            p_value: None,
            n_obs: r.estimate.n_total_cells,
        });
    }
    for r in rows.iter().filter(|r| r.term == "treated") {
        println!("{:<24} {:>9.4} ({:.4})", r.model, r.estimate, r.se.unwrap_or(f64::NAN));
    }
    Ok(vec![emit(&common.out, "classic", &rows, common.format)?])
}

#[derive(Debug, Serialize)]
struct SeasonRow<'a> {
    unit_id: &'a str,
    period: String,
    log_accidents: f64,
    ma3: f64,
}

/// Moving averages restart after a missing month; at the ends of each run of
/// observed months the window shrinks to the neighbours that exist.
fn seasonality(input: &Input, common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let panel = load(input, &cfg)?;
    let logs = log_outcome(&panel)?;
    let mut rows = Vec::new();
    for (u, meta) in panel.units().iter().enumerate() {
        let mut t = 0;
        while t < panel.n_periods() {
            if logs.get(u, t).is_none() {
                t += 1;
                continue;
            }
            let start = t;
            while t < panel.n_periods() && logs.get(u, t).is_some() {
                t += 1;
            }
            let values: Vec<f64> = (start..t).map(|s| *logs.get(u, s).unwrap()).collect();
            for (k, ma) in moving_average(&values, 3).into_iter().enumerate() {
                rows.push(SeasonRow {
                    unit_id: &meta.id,
                    period: panel.periods()[start + k].to_string(),
                    log_accidents: values[k],
                    ma3: ma,
                });
            }
        }
    }
    Ok(vec![emit(&common.out, "seasonality", &rows, common.format)?])
}

#[derive(Debug, Serialize)]
struct TruthRow<'a> {
    unit_id: &'a str,
    period: String,
    tau: f64,
}

#[derive(Debug, Serialize)]
struct EstimandRow<'a> {
    estimand: &'a str,
    value: f64,
}

fn simulate(common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let mut dgp = cfg.dgp.clone();
    if let Some(s) = common.seed {
        dgp.seed = s;
    }
    let (panel, truth) = generate(&dgp)?;
    let dir = &common.out;
    let mut written = Vec::new();
    type Writer = fn(&Panel, &Path) -> stagger_core::Result<()>;
    let files: [(&str, Writer); 3] =
        [("units.csv", write_units_csv), ("panel.csv", write_panel_csv), ("firms.csv", write_firms_csv)];
    for (name, write) in files {
        let dest = dir.join(name);
        with_temp(dir, &dest, |tmp| Ok(write(&panel, tmp.path())?))?;
        written.push(dest);
    }
    let mut cells = Vec::new();
    for (u, t, _) in panel.cells() {
        if panel.is_treated(u, t) {
            cells.push(TruthRow {
                unit_id: &panel.units()[u].id,
                period: panel.periods()[t].to_string(),
                tau: truth.tau(u, t),
            });
        }
    }
    written.push(emit(dir, "truth", &cells, common.format)?);
    let estimands: Vec<EstimandRow> =
        truth.estimands.iter().map(|(k, v)| EstimandRow { estimand: k, value: *v }).collect();
    written.push(emit(dir, "truth_estimands", &estimands, common.format)?);
    println!("simulated {} units x {} periods, seed {}", panel.n_units(), panel.n_periods(), dgp.seed);
    Ok(written)
}

#[derive(Debug, Serialize)]
struct DrawRow<'a> {
    estimator: &'a str,
    rep: usize,
    estimate: f64,
    se: f64,
    truth: f64,
    p_value: f64,
}

fn montecarlo(reps: Option<usize>, common: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = setup(common)?;
    let mut dgp = cfg.dgp.clone();
    if let Some(s) = common.seed {
        dgp.seed = s;
    }
    let mut opts = cfg.montecarlo.options(common.threads);
    if let Some(r) = reps {
        opts.reps = r;
    }
    let reports = monte_carlo(&cfg.montecarlo.estimators, &dgp, &opts)?;
    for r in &reports {
        eprintln!(
            "{}: {}/{} reps, bias {:.5}, rmse {:.5}, coverage {:.3} ({:.1}s)",
            r.estimator, r.completed, r.reps, r.bias, r.rmse, r.coverage_95, r.runtime_secs
        );
        if r.aborted {
            eprintln!("warning: {} stopped early after {} failures", r.estimator, r.failures);
        }
        for m in r.failure_messages.iter().take(5) {
            eprintln!("  {m}");
        }
    }
    let draws: Vec<DrawRow> = reports
        .iter()
        .flat_map(|r| {
            r.draws.iter().map(|d| DrawRow {
                estimator: &r.estimator,
                rep: d.rep,
                estimate: d.estimate,
                se: d.se,
                truth: d.truth,
                p_value: d.p_value,
            })
        })
        .collect();
    Ok(vec![
        emit(&common.out, "mc_report", &reports, common.format)?,
        emit(&common.out, "mc_draws", &draws, common.format)?,
    ])
}
