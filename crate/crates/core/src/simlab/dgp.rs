//! Synthetic staggered-rollout panels with known cell-level effects.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::imputation::{CellEffects, TreatedCell, WeightScheme, WINTER_MONTHS};
use crate::panel::{country_median_split, OutcomeCell, Panel, PeriodId, Side, UnitMeta};
use crate::par::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectProfile {
    Zero,
    Constant {
        tau: f64,
    },
    /// `τ = rate · (h + 1)` at event time `h`.
    LinearGrowth {
        rate: f64,
    },
    /// Separate effects in non-winter (March–October) and winter months.
    Seasonal {
        non_winter: f64,
        winter: f64,
    },
    /// Effects by side of the within-country median of `attribute`.
    ByGroup {
        above: f64,
        below: f64,
        attribute: String,
    },
}

impl EffectProfile {
    fn tau(&self, h: i64, period: &PeriodId, side: Side) -> f64 {
        match self {
            EffectProfile::Zero => 0.0,
            EffectProfile::Constant { tau } => *tau,
            EffectProfile::LinearGrowth { rate } => rate * (h + 1) as f64,
            EffectProfile::Seasonal { non_winter, winter } => {
                if period.month.is_some_and(|m| WINTER_MONTHS.contains(&m)) {
                    *winter
                } else {
                    *non_winter
                }
            }
            EffectProfile::ByGroup { above, below, .. } => match side {
                Side::Above => *above,
                Side::Below => *below,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LaunchProcess {
    UniformRandom,
    /// Larger units launch earlier; `strength` in `[0, 1]` is the correlation
    /// of the latent timing score with log population.
    AttributeCorrelated {
        strength: f64,
    },
    /// Units with steeper own accident trends launch earlier, which breaks
    /// parallel trends. `strength` in `[0, 1]`.
    ShockCorrelated {
        strength: f64,
    },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    /// `exp(μ + ε)`, `ε ~ N(0, σ²)`; rounded to integer counts unless
    /// `continuous`.
    Lognormal {
        sigma: f64,
        continuous: bool,
    },
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub start: PeriodId,
    /// Mean log count of a typical unit.
    pub base_log_mean: f64,
    pub unit_effect_sd: f64,
    pub seasonal_amplitude: f64,
    /// Phase of the sinusoid in months; the peak falls `3 − phase` months
    /// after January.
    pub seasonal_phase: f64,
    /// Per-month log offsets added on top of the sinusoid, January first.
    pub month_offsets: [f64; 12],
    /// Common log trend per month.
    pub calendar_trend: f64,
    pub effect: EffectProfile,
    pub launch: LaunchProcess,
    /// Launch months are drawn from these period positions (inclusive).
    pub launch_window: (usize, usize),
    pub n_never_treated: usize,
    pub noise: Noise,
    pub n_countries: usize,
    pub n_attributes: usize,
    /// Standard deviation of unit-specific trends for shock-correlated launches.
    pub unit_trend_sd: f64,
    /// Probability of each additional firm entering after the first.
    pub extra_firm_prob: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 93,
            n_periods: 66,
            start: PeriodId::monthly(2016, 1),
            base_log_mean: 93f64.ln(),
            unit_effect_sd: 0.6,
            seasonal_amplitude: 0.15,
            seasonal_phase: 0.0,
            month_offsets: [0.0, -0.05, 0.02, 0.0, 0.03, 0.01, -0.04, 0.0, 0.02, 0.03, -0.01, -0.06],
            calendar_trend: -0.001,
            effect: EffectProfile::Constant { tau: 0.08 },
            launch: LaunchProcess::UniformRandom,
            launch_window: (29, 64),
            n_never_treated: 0,
            noise: Noise::Lognormal { sigma: 0.1, continuous: false },
            n_countries: 6,
            n_attributes: 4,
            unit_trend_sd: 0.004,
            extra_firm_prob: 0.5,
            seed: 1,
        }
    }
}

pub const ATTRIBUTE_PREFIX: &str = "x";

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 4 {
            return Err(Error::invalid("n_units must be at least 4"));
        }
        if self.n_never_treated > self.n_units {
            return Err(Error::invalid("more never-treated units than units"));
        }
        if self.n_periods < 2 {
            return Err(Error::invalid("n_periods must be at least 2"));
        }
        let (a, b) = self.launch_window;
        if a > b || b >= self.n_periods {
            return Err(Error::invalid("launch window must lie inside the panel"));
        }
        if let Noise::Lognormal { sigma, .. } = self.noise {
            if !(sigma >= 0.0) {
                return Err(Error::invalid("noise sigma must be nonnegative"));
            }
        }
        if self.n_countries == 0 {
            return Err(Error::invalid("need at least one country"));
        }
        let strength = match self.launch {
            LaunchProcess::AttributeCorrelated { strength } | LaunchProcess::ShockCorrelated { strength } => strength,
            _ => 0.0,
        };
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::invalid("launch strength must lie in [0, 1]"));
        }
        if let EffectProfile::ByGroup { attribute, .. } = &self.effect {
            let known = (1..=self.n_attributes).any(|k| *attribute == format!("{ATTRIBUTE_PREFIX}{k}"));
            if !known && attribute != "population" {
                return Err(Error::invalid(format!("unknown attribute '{attribute}' for by_group effects")));
            }
        }
        // keep exp() finite with a generous margin
        let bound = self.base_log_mean.abs()
            + 8.0 * self.unit_effect_sd
            + self.seasonal_amplitude.abs()
            + 12.0 * 0.1
            + self.calendar_trend.abs() * self.n_periods as f64
            + 8.0 * self.unit_trend_sd * self.n_periods as f64;
        if bound > 600.0 {
            return Err(Error::invalid("log mean bounds overflow exp"));
        }
        Ok(())
    }

    /// Common period effect at panel position `t`.
    pub fn period_effect(&self, t: usize) -> f64 {
        let p = self.start.step(t as i64);
        let m = p.month.unwrap_or(1) as usize;
        let angle = 2.0 * std::f64::consts::PI * (m as f64 - 1.0 + self.seasonal_phase) / 12.0;
        self.seasonal_amplitude * angle.sin() + self.month_offsets[m - 1] + self.calendar_trend * t as f64
    }
}

/// Ground truth that produced a simulated panel.
#[derive(Debug, Clone, Serialize)]
pub struct Truth {
    pub n_periods: usize,
    /// `τ_it`, unit-major; zero on untreated cells.
    pub tau: Vec<f64>,
    pub unit_effect: Vec<f64>,
    pub unit_trend: Vec<f64>,
    pub period_effect: Vec<f64>,
    pub sides: Vec<Side>,
    /// True value of each named estimand on the full panel.
    pub estimands: BTreeMap<String, f64>,
}

impl Truth {
    pub fn tau(&self, unit: usize, period: usize) -> f64 {
        self.tau[unit * self.n_periods + period]
    }

    /// True cell effects of the panel the truth belongs to, shaped like an
    /// estimator's output.
    pub fn cell_effects(&self, panel: &Panel) -> CellEffects {
        let mut out = CellEffects::default();
        for (u, t, _) in panel.cells() {
            if panel.is_treated(u, t) {
                out.cells.push(TreatedCell {
                    unit: u,
                    period: t,
                    event_time: panel.event_time(u, t).unwrap(),
                    tau: self.tau(u, t),
                });
            }
        }
        out
    }
}

/// Weighted average of the true effects under `scheme` on the full panel.
pub fn true_estimand(truth: &Truth, panel: &Panel, scheme: &WeightScheme) -> Result<f64> {
    let eff = truth.cell_effects(panel);
    let w = scheme.weights(panel, &eff, Some(&truth.sides))?;
    crate::imputation::aggregate(&eff, &w)
}

pub const NAMED_ESTIMANDS: [&str; 6] = ["all_post", "first_12", "non_winter", "winter", "excl_covid", "contrast"];

pub fn named_schemes() -> Vec<WeightScheme> {
    NAMED_ESTIMANDS.iter().map(|n| WeightScheme::by_name(n).unwrap()).collect()
}

const FIRMS: [&str; 3] = ["firm_a", "firm_b", "firm_c"];

pub fn generate(config: &DgpConfig) -> Result<(Panel, Truth)> {
    generate_rep(config, 0)
}

/// Replication `rep`: an independent random stream of `config.seed`.
pub fn generate_rep(config: &DgpConfig, rep: u64) -> Result<(Panel, Truth)> {
    config.validate()?;
    let mut rng = rng_for(config.seed, rep);
    let n = config.n_units;
    let np = config.n_periods;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let z = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { std_normal.sample(rng) };

    // unit characteristics
    let country_centers: Vec<(f64, f64)> =
        (0..config.n_countries).map(|c| (46.0 + 2.0 * c as f64, 6.0 + 3.0 * c as f64)).collect();
    let mut units = Vec::with_capacity(n);
    let mut unit_effect = Vec::with_capacity(n);
    let mut unit_trend = Vec::with_capacity(n);
    let mut log_pop = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % config.n_countries;
        let mut m = UnitMeta::new(format!("city{:03}", i + 1), format!("C{}", c + 1));
        let zu = z(&mut rng);
        let a = config.base_log_mean + config.unit_effect_sd * zu;
        // population tracks the unit effect loosely
        let lp = 11.8 + 0.7 * zu + 0.3 * z(&mut rng);
        m.population = lp.exp().round().max(1.0) as u64;
        m.latitude = Some(country_centers[c].0 + rng.random_range(-1.0..1.0));
        m.longitude = Some(country_centers[c].1 + rng.random_range(-1.5..1.5));
        for k in 1..=config.n_attributes {
            // country-level shifts
            let v = 0.5 * c as f64 + z(&mut rng);
            m.attributes.insert(format!("{ATTRIBUTE_PREFIX}{k}"), v);
        }
        units.push(m);
        unit_effect.push(a);
        unit_trend.push(0.0);
        log_pop.push(lp);
    }

    // launch timing
    let (lo, hi) = config.launch_window;
    let span = (hi - lo + 1) as f64;
    let phi = StdNormal::standard();
    let n_treated = n - config.n_never_treated;
    let mut launch_pos: Vec<Option<usize>> = vec![None; n];
    let standardize = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt().max(1e-12);
        v.iter().map(|x| (x - m) / sd).collect()
    };
    match &config.launch {
        LaunchProcess::None => {}
        LaunchProcess::UniformRandom => {
            for slot in launch_pos.iter_mut().take(n_treated) {
                *slot = Some(rng.random_range(lo..=hi));
            }
        }
        LaunchProcess::AttributeCorrelated { strength } | LaunchProcess::ShockCorrelated { strength } => {
            let driver = if matches!(config.launch, LaunchProcess::ShockCorrelated { .. }) {
                for g in unit_trend.iter_mut() {
                    *g = config.unit_trend_sd * z(&mut rng);
                }
                standardize(&unit_trend)
            } else {
                standardize(&log_pop)
            };
            let s = *strength;
            for (i, slot) in launch_pos.iter_mut().enumerate().take(n_treated) {
                // higher driver → earlier launch
                let score = -s * driver[i] + (1.0 - s * s).sqrt() * z(&mut rng);
                let k = (phi.cdf(score) * span).floor().min(span - 1.0) as usize;
                *slot = Some(lo + k);
            }
        }
    }
    for (i, m) in units.iter_mut().enumerate() {
        if let Some(pos) = launch_pos[i] {
            let l = config.start.step(pos as i64);
            m.launch = Some(l);
            m.firm_launches.push((FIRMS[0].to_string(), l));
            for f in &FIRMS[1..] {
                if rng.random::<f64>() < config.extra_firm_prob {
                    let gap = rng.random_range(0..12);
                    m.firm_launches.push((f.to_string(), l.step(gap)));
                }
            }
            m.firm_launches.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        }
    }

    // sides for group effects come from the generated attributes
    let shell = Panel::from_counts(config.start, units.clone(), &vec![vec![1.0; np]; n])?;
    let attribute = match &config.effect {
        EffectProfile::ByGroup { attribute, .. } => attribute.clone(),
        _ => format!("{ATTRIBUTE_PREFIX}1"),
    };
    let sides = if config.n_attributes > 0 || attribute == "population" {
        if attribute == "population" {
            let mut with_pop = units.clone();
            for u in &mut with_pop {
                u.attributes.insert("population".into(), u.population as f64);
            }
            let p = Panel::from_counts(config.start, with_pop, &vec![vec![1.0; np]; n])?;
            country_median_split(&p, "population")?.side
        } else {
            country_median_split(&shell, &attribute)?.side
        }
    } else {
        vec![Side::Below; n]
    };

    let period_effect: Vec<f64> = (0..np).map(|t| config.period_effect(t)).collect();
    let center = (np as f64 - 1.0) / 2.0;
    let mut tau = vec![0.0; n * np];
    let mut cells = Vec::with_capacity(n * np);
    for i in 0..n {
        for t in 0..np {
            let p = config.start.step(t as i64);
            let h = launch_pos[i].map(|l| t as i64 - l as i64);
            let effect = match h {
                Some(h) if h >= 0 => config.effect.tau(h, &p, sides[i]),
                _ => 0.0,
            };
            tau[i * np + t] = effect;
            let mu = unit_effect[i] + period_effect[t] + unit_trend[i] * (t as f64 - center) + effect;
            let y = match config.noise {
                Noise::Lognormal { sigma, continuous } => {
                    let v = (mu + sigma * z(&mut rng)).exp();
                    if continuous {
                        v
                    } else {
                        v.round()
                    }
                }
                Noise::Poisson => {
                    let lam = mu.exp();
                    if lam > 0.0 {
                        Poisson::new(lam).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut rng)
                    } else {
                        0.0
                    }
                }
            };
            cells.push(Some(OutcomeCell::count(y)));
        }
    }
    let periods: Vec<PeriodId> = (0..np).map(|t| config.start.step(t as i64)).collect();
    let panel = Panel::new(config.start.frequency(), periods, units, cells)?;
    let mut truth =
        Truth { n_periods: np, tau, unit_effect, unit_trend, period_effect, sides, estimands: BTreeMap::new() };
    for s in named_schemes() {
        if let Ok(v) = true_estimand(&truth, &panel, &s) {
            truth.estimands.insert(s.name.clone(), v);
        }
    }
    Ok((panel, truth))
}
