//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagger_cli::{cost_projection, run, Cli};
use stagger_core::classic::annual_dd;
use stagger_core::fe::FeMethod;
use stagger_core::imputation::{
    placebo_event_study, prepare_sample, to_semi_elasticity, EventStudyOptions, Granularity, Imputation,
    PipelineOptions, SampleOptions,
};
use stagger_core::panel::{Frequency, OutcomeCell, Panel, UnitMeta};
use stagger_core::sdid::{sdid_estimate, SdidConfig};
use stagger_core::simlab::{
    generate_rep, monte_carlo, DgpConfig, EffectProfile, EstimatorSpec, McOptions, McReport, Noise,
};
use stagger_core::PeriodId;

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mc(specs: &[EstimatorSpec], cfg: &DgpConfig, reps: usize) -> Result<Vec<McReport>, String> {
    monte_carlo(specs, cfg, &McOptions { reps, ..Default::default() }).map_err(err)
}

fn imputation(scheme: &str) -> EstimatorSpec {
    EstimatorSpec::Imputation { scheme: scheme.into(), pipeline: PipelineOptions::default() }
}

fn heterogeneity() -> EstimatorSpec {
    EstimatorSpec::Heterogeneity {
        attribute: "x1".into(),
        scheme: "all_post".into(),
        pipeline: PipelineOptions { granularity: Granularity::HalfYear, ..Default::default() },
    }
}

fn random_panel(rng: &mut ChaCha8Rng) -> Panel {
    let n = rng.random_range(2..=8);
    let t = rng.random_range(2..=12);
    let start = PeriodId::monthly(2019, 1);
    let units = (0..n)
        .map(|i| {
            let launch = rng.random_bool(0.8).then(|| start.step(rng.random_range(0..t as i64 + 2)));
            UnitMeta::new(format!("u{i}"), "A").with_launch(launch)
        })
        .collect();
    let counts: Vec<Vec<f64>> =
        (0..n).map(|_| (0..t).map(|_| rng.random_range(1.0..200.0f64).round()).collect()).collect();
    Panel::from_counts(start, units, &counts).unwrap()
}

/// Unit and period dummies fitted on untreated cells by least squares, then
/// explicit imputation of every treated cell whose dummy row is estimable.
fn dense_oracle(panel: &Panel) -> BTreeMap<(usize, usize), Option<f64>> {
    let (n, t) = (panel.n_units(), panel.n_periods());
    let row = |u: usize, s: usize| {
        let mut r = DVector::zeros(n + t);
        r[u] = 1.0;
        r[n + s] = 1.0;
        r
    };
    let untreated: Vec<_> = panel.cells().filter(|(u, s, _)| !panel.is_treated(*u, *s)).collect();
    let mut x = DMatrix::zeros(untreated.len(), n + t);
    let mut y = DVector::zeros(untreated.len());
    for (k, (u, s, c)) in untreated.iter().enumerate() {
        x.set_row(k, &row(*u, *s).transpose());
        y[k] = c.accidents.ln();
    }
    let eig = (x.transpose() * &x).symmetric_eigen();
    let keep: Vec<usize> = (0..n + t).filter(|&k| eig.eigenvalues[k] > 1e-9).collect();
    let pinv = |v: &DVector<f64>| {
        keep.iter().fold(DVector::zeros(n + t), |acc, &k| {
            let q = eig.eigenvectors.column(k);
            acc + q * (q.dot(v) / eig.eigenvalues[k])
        })
    };
    let mut b = pinv(&(x.transpose() * &y));
    for _ in 0..3 {
        b += pinv(&(x.transpose() * (&y - &x * &b)));
    }
    let mut out = BTreeMap::new();
    for (u, s, c) in panel.cells().filter(|(u, s, _)| panel.is_treated(*u, *s)) {
        let r = row(u, s);
        let proj = keep.iter().fold(DVector::zeros(n + t), |acc, &k| {
            let q = eig.eigenvectors.column(k);
            acc + q * q.dot(&r)
        });
        let identified = (&r - proj).norm() < 1e-8;
        out.insert((u, s), identified.then(|| c.accidents.ln() - r.dot(&b)));
    }
    out
}

fn ac1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 100 {
        let panel = random_panel(&mut rng);
        let opts = SampleOptions { include_never: true, ..Default::default() };
        let Ok(sample) = prepare_sample(&panel, &opts) else { continue };
        let Ok(imp) = Imputation::new(&sample, None, false, FeMethod::Auto) else { continue };
        let ours: BTreeMap<_, _> = imp.effects.cells.iter().map(|c| ((c.unit, c.period), c.tau)).collect();
        for (key, want) in dense_oracle(&sample.panel) {
            match (want, ours.get(&key)) {
                (Some(w), Some(g)) => worst = worst.max((w - g).abs()),
                (None, None) => {}
                _ => return Ok((false, format!("identification differs at cell {key:?}"))),
            }
        }
        checked += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((worst < 1e-8 && secs < 10.0, format!("100 panels, max |diff| {worst:.2e}, {secs:.2}s")))
}

fn ac2() -> Outcome {
    let mut worst = 0.0f64;
    let mut cells = 0;
    for effect in [
        EffectProfile::Constant { tau: 0.08 },
        EffectProfile::LinearGrowth { rate: 0.005 },
        EffectProfile::Seasonal { non_winter: 0.115, winter: 0.019 },
    ] {
        let cfg = DgpConfig {
            effect,
            noise: Noise::Lognormal { sigma: 0.0, continuous: true },
            unit_trend_sd: 0.0,
            ..Default::default()
        };
        for rep in 0..3 {
            let (panel, truth) = generate_rep(&cfg, rep).map_err(err)?;
            let sample = prepare_sample(&panel, &SampleOptions::default()).map_err(err)?;
            let imp = Imputation::new(&sample, None, false, FeMethod::Auto).map_err(err)?;
            for c in &imp.effects.cells {
                worst = worst.max((c.tau - truth.tau(c.unit, c.period)).abs());
                cells += 1;
            }
        }
    }
    Ok((cells > 0 && worst < 1e-9, format!("{cells} treated cells, max |tau_hat - tau| {worst:.2e}")))
}

fn ac3_ac4() -> Result<(Outcome, Outcome), String> {
    let started = Instant::now();
    let r = mc(&[imputation("all_post")], &DgpConfig::default(), 200)?.remove(0);
    let secs = started.elapsed().as_secs_f64();
    let ok = r.completed == 200;
    let ac3 = (
        ok && r.bias.abs() <= 0.005 && secs < 300.0,
        format!("200 reps, bias {:.5}, rmse {:.5}, {secs:.1}s", r.bias, r.rmse),
    );
    let ac4 = (
        ok && r.coverage_95 >= 0.93,
        format!("coverage {:.3}, mean se {:.5}, sd {:.5}", r.coverage_95, r.mean_se, r.sd),
    );
    Ok((Ok(ac3), Ok(ac4)))
}

fn ac5() -> Outcome {
    let cfg = DgpConfig { effect: EffectProfile::LinearGrowth { rate: 0.005 }, ..Default::default() };
    let r = mc(&[imputation("all_post"), EstimatorSpec::Twfe { country_year: false }], &cfg, 200)?;
    let below = r[1].draws.iter().filter(|d| r[0].draw(d.rep).is_some_and(|i| d.estimate < i.estimate)).count();
    let share = below as f64 / 200.0;
    Ok((
        share >= 0.95,
        format!(
            "twfe below imputation in {below}/200, mean twfe {:.4} vs {:.4}",
            r[1].mean_estimate, r[0].mean_estimate
        ),
    ))
}

fn ac6() -> Outcome {
    let (pct, _) = to_semi_elasticity(0.041, 0.0);
    Ok(((pct - 4.19).abs() <= 0.01 && pct.round() == 4.0, format!("100(e^0.041 - 1) = {pct:.4}%")))
}

fn ac7() -> Outcome {
    let c = cost_projection(8.2, 93.2, 61_000.0).map_err(err)?;
    let m = (c.monthly_cost - 466_186.0).abs() / 466_186.0;
    let a = (c.annual_cost - 5.6e6).abs() / 5.6e6;
    Ok((m <= 0.0015 && a <= 0.01, format!("monthly {:.1}, annual {:.1}", c.monthly_cost, c.annual_cost)))
}

fn exact_donor_panel(rng: &mut ChaCha8Rng, tau: f64) -> Panel {
    let start = PeriodId::monthly(2018, 1);
    let (periods, launch) = (30, 20);
    let donors: Vec<Vec<f64>> = (0..12)
        .map(|_| {
            let (a, b, c) = (rng.random_range(2.0..5.0), rng.random_range(-0.03..0.03), rng.random_range(-0.3..0.3));
            (0..periods).map(|t| a + b * t as f64 + c * (t as f64 * 1.3).sin() + rng.random_range(-0.1..0.1)).collect()
        })
        .collect();
    let mut units = Vec::new();
    let mut logs = Vec::new();
    for i in 0..3 {
        let mut w: Vec<f64> = donors.iter().map(|_| if rng.random_bool(0.4) { rng.random() } else { 0.0 }).collect();
        w[i] += 0.1;
        let s: f64 = w.iter().sum();
        let shift = rng.random_range(-1.0..1.0);
        logs.push(
            (0..periods)
                .map(|t| {
                    let mix: f64 = w.iter().zip(&donors).map(|(wj, d)| wj / s * d[t]).sum();
                    shift + mix + if t >= launch { tau } else { 0.0 }
                })
                .collect::<Vec<f64>>(),
        );
        units.push(UnitMeta::new(format!("t{i}"), "X").with_launch(Some(start.step(launch as i64))));
    }
    for (j, d) in donors.into_iter().enumerate() {
        units.push(UnitMeta::new(format!("d{j}"), "X"));
        logs.push(d);
    }
    let counts: Vec<Vec<f64>> = logs.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    Panel::from_counts(start, units, &counts).unwrap()
}

fn ac8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut mspe) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let p = exact_donor_panel(&mut rng, 0.06);
        let r =
            sdid_estimate(&p, &SdidConfig { zeta: Some(0.0), placebo_reps: 0, ..Default::default() }).map_err(err)?;
        worst = worst.max((r.tau_pooled - 0.06).abs());
        mspe = mspe.max(r.mspe_monthly);
    }
    let cfg = DgpConfig { effect: EffectProfile::Zero, ..Default::default() };
    let spec = EstimatorSpec::Sdid { window: (0, 40), config: SdidConfig { placebo_reps: 100, ..Default::default() } };
    let r = mc(&[spec], &cfg, 100)?.remove(0);
    let inside = r.draws.iter().filter(|d| d.estimate.abs() <= 2.0 * d.se).count();
    let share = inside as f64 / 100.0;
    Ok((
        worst < 1e-6 && mspe < 1e-10 && r.completed == 100 && share >= 0.9,
        format!("exact donor max |err| {worst:.2e}, mspe {mspe:.1e}; null within 2 SE in {inside}/100 seeds"),
    ))
}

fn ac9() -> Outcome {
    let cfg = DgpConfig { effect: EffectProfile::Zero, ..Default::default() };
    let opts = EventStudyOptions::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for shift in [12, 24] {
        let (mut sig, mut total) = (0, 0);
        for rep in 0..500 {
            let (panel, _) = generate_rep(&cfg, rep).map_err(err)?;
            let run = placebo_event_study(&panel, shift, &SampleOptions::default(), Granularity::Quarter, &opts)
                .map_err(err)?;
            sig += run.n_significant;
            total += run.points.len();
        }
        let share = sig as f64 / total as f64;
        pass &= (0.02..=0.08).contains(&share);
        parts.push(format!("shift {shift}: {sig}/{total} = {:.1}%", 100.0 * share));
    }
    let pooled = mc(
        &[12, 24].map(|shift| EstimatorSpec::Placebo {
            shift,
            scheme: "all_post".into(),
            pipeline: PipelineOptions::default(),
        }),
        &cfg,
        500,
    )?;
    for r in &pooled {
        parts.push(format!("{} pooled rejection {:.1}%", r.estimator, 100.0 * r.rejection_5));
    }
    Ok((pass, parts.join("; ")))
}

fn ac10() -> Outcome {
    let power_cfg = DgpConfig {
        effect: EffectProfile::ByGroup { above: 0.11, below: 0.0, attribute: "x1".into() },
        ..Default::default()
    };
    let power = mc(&[heterogeneity()], &power_cfg, 200)?.remove(0).rejection_5;
    let size_cfg = DgpConfig { effect: EffectProfile::Constant { tau: 0.08 }, ..Default::default() };
    let size = mc(&[heterogeneity()], &size_cfg, 500)?.remove(0).rejection_5;
    Ok((
        power >= 0.8 && (0.025..=0.075).contains(&size),
        format!("power {:.1}% over 200 reps, equal-group rejection {:.1}% over 500 reps", 100.0 * power, 100.0 * size),
    ))
}

fn ac11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let y: [f64; 4] = std::array::from_fn(|_| rng.random_range(1.0..10_000.0));
        let units = vec![UnitMeta::new("t", "X").with_launch(Some(PeriodId::annual(2020))), UnitMeta::new("c", "X")];
        let cells = y.iter().map(|&v| Some(OutcomeCell::count(v))).collect();
        let p = Panel::new(Frequency::Annual, vec![PeriodId::annual(2018), PeriodId::annual(2020)], units, cells)
            .map_err(err)?;
        let hand = (y[1].ln() - y[0].ln()) - (y[3].ln() - y[2].ln());
        worst = worst.max((annual_dd(&p).map_err(err)?.tau_hat - hand).abs());
    }
    Ok((worst < 1e-12, format!("1000 random 2x2 panels, max |diff| {worst:.2e}")))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let parsed = Cli::try_parse_from(std::iter::once("stagger").chain(args.iter().copied())).map_err(err)?;
    run(&parsed).map(|_| ()).map_err(err)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    out
}

fn ac12() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let data = root.join("data");
    let d = data.to_str().unwrap();
    cli(&["simulate", "--out", d, "--seed", "12"])?;
    let (u, p, f) = (format!("{d}/units.csv"), format!("{d}/panel.csv"), format!("{d}/firms.csv"));
    let input = ["--units", &u, "--panel", &p, "--firms", &f];
    let commands: Vec<Vec<&str>> = vec![
        vec!["estimate", "--preset", "all_post", "--preset", "first_12", "--preset", "annual_dd"],
        vec!["event-study"],
        vec!["placebo"],
        vec!["heterogeneity", "--attribute", "x1"],
        vec!["sdid", "--from", "2016-01", "--to", "2019-05", "--placebo-reps", "20"],
        vec!["classic", "--attribute", "x1"],
        vec!["seasonality"],
        vec!["cost-projection", "--effect-pct", "8.2", "--baseline", "93.2", "--cost", "61000"],
    ];
    let mut files = 0;
    let mut differing = Vec::new();
    for (k, cmd) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for (run_no, threads) in [None, Some("1"), Some("4")].into_iter().enumerate() {
            let out = root.join(format!("c{k}_{run_no}"));
            let o = out.to_str().unwrap();
            let mut args: Vec<&str> = cmd.clone();
            if cmd[0] != "cost-projection" {
                args.extend(input);
            }
            args.extend(["--out", o, "--seed", "5"]);
            if let Some(t) = threads {
                args.extend(["--threads", t]);
            }
            cli(&args).map_err(|e| format!("{}: {e}", cmd[0]))?;
            outputs.push(snapshot(&out));
        }
        files += outputs[0].len();
        if outputs.iter().any(|o| *o != outputs[0]) {
            differing.push(cmd[0]);
        }
    }
    let mut mc_runs = Vec::new();
    for (run_no, threads) in ["1", "4", "1"].into_iter().enumerate() {
        let out = root.join(format!("mc_{run_no}"));
        cli(&["montecarlo", "--reps", "20", "--seed", "3", "--threads", threads, "--out", out.to_str().unwrap()])?;
        let snap = snapshot(&out);
        mc_runs.push(snap);
    }
    files += mc_runs[0].len();
    if mc_runs.iter().any(|o| *o != mc_runs[0]) {
        differing.push("montecarlo");
    }
    let again = root.join("data2");
    cli(&["simulate", "--out", again.to_str().unwrap(), "--seed", "12"])?;
    if snapshot(&again) != snapshot(&data) {
        differing.push("simulate");
    }
    Ok((
        differing.is_empty(),
        format!("10 commands, {files} report files compared across runs and thread counts; differing: {differing:?}"),
    ))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, &str, Outcome)> =
        vec![("AC1", "oracle equivalence", ac1()), ("AC2", "exact recovery", ac2())];
    match ac3_ac4() {
        Ok((a, b)) => {
            results.push(("AC3", "Monte Carlo recovery", a));
            results.push(("AC4", "conservative coverage", b));
        }
        Err(e) => {
            results.push(("AC3", "Monte Carlo recovery", Err(e.clone())));
            results.push(("AC4", "conservative coverage", Err(e)));
        }
    }
    results.extend([
        ("AC5", "TWFE bias direction", ac5()),
        ("AC6", "semi-elasticity transform", ac6()),
        ("AC7", "cost projection", ac7()),
        ("AC8", "synthetic DiD", ac8()),
        ("AC9", "placebo suites", ac9()),
        ("AC10", "heterogeneity power and size", ac10()),
        ("AC11", "2x2 closed form", ac11()),
        ("AC12", "determinism", ac12()),
    ]);
    let mut failed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
