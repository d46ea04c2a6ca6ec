use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stagger_core::imputation::Granularity;
use stagger_core::PeriodId;

#[derive(Debug, Parser)]
#[command(name = "stagger", version, about = "Staggered-rollout difference-in-differences toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pooled effect estimates for one or more presets.
    Estimate {
        #[command(flatten)]
        input: Input,
        #[arg(long = "preset", value_enum, default_values_t = [Preset::AllPost])]
        presets: Vec<Preset>,
        #[command(flatten)]
        common: Common,
    },
    /// Event-time profile with leads, post-launch months and the pooled tail.
    EventStudy {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value_t = Preset::AllPost)]
        preset: Preset,
        #[command(flatten)]
        common: Common,
    },
    /// Event studies on launch dates shifted into the past.
    Placebo {
        #[command(flatten)]
        input: Input,
        #[arg(long = "shift", default_values_t = [12, 24], allow_negative_numbers = true)]
        shifts: Vec<i64>,
        #[arg(long, value_enum, default_value_t = Preset::AllPost)]
        preset: Preset,
        #[command(flatten)]
        common: Common,
    },
    /// Effects above and below the within-country median of attributes.
    Heterogeneity {
        #[command(flatten)]
        input: Input,
        #[arg(long = "attribute", required = true)]
        attributes: Vec<String>,
        #[arg(long, value_enum, default_value_t = Preset::AllPost)]
        preset: Preset,
        #[command(flatten)]
        common: Common,
    },
    /// Staggered synthetic difference-in-differences.
    Sdid {
        #[command(flatten)]
        input: Input,
        /// First period of the estimation window.
        #[arg(long)]
        from: Option<PeriodId>,
        /// Last period of the estimation window.
        #[arg(long)]
        to: Option<PeriodId>,
        #[arg(long)]
        placebo_reps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pooled TWFE (OLS and PPML), launch-timing diagnostics and 2SLS.
    Classic {
        #[command(flatten)]
        input: Input,
        /// Attributes used to build interaction instruments.
        #[arg(long = "attribute")]
        attributes: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Log accidents per unit with a centered 3-month moving average.
    Seasonality {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        common: Common,
    },
    /// Monthly and annual cost of an effect on accidents.
    CostProjection {
        #[arg(long)]
        effect_pct: f64,
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        cost: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Write a simulated panel and its true effects.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run estimators over simulated replications.
    Montecarlo {
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Input {
    #[arg(long)]
    pub units: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long)]
    pub firms: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cohort granularity for leave-out residuals.
    #[arg(long, value_parser = parse_granularity)]
    pub cohorts: Option<Granularity>,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    #[value(alias = "structured")]
    Json,
}

/// Estimation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Preset {
    AllPost,
    InclNeverTreated,
    #[value(name = "first_12")]
    First12,
    NonWinter,
    Winter,
    ExclCovid,
    AnnualDd,
    AnnualDdNever,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::AllPost => "all_post",
            Preset::InclNeverTreated => "incl_never_treated",
            Preset::First12 => "first_12",
            Preset::NonWinter => "non_winter",
            Preset::Winter => "winter",
            Preset::ExclCovid => "excl_covid",
            Preset::AnnualDd => "annual_dd",
            Preset::AnnualDdNever => "annual_dd_never",
        }
    }

    pub fn include_never(self) -> bool {
        matches!(self, Preset::InclNeverTreated | Preset::AnnualDdNever)
    }

    pub fn is_annual(self) -> bool {
        matches!(self, Preset::AnnualDd | Preset::AnnualDdNever)
    }

    /// Weight-scheme name for monthly presets.
    pub fn scheme(self) -> Option<&'static str> {
        match self {
            Preset::AllPost | Preset::InclNeverTreated => Some("all_post"),
            Preset::First12 => Some("first_12"),
            Preset::NonWinter => Some("non_winter"),
            Preset::Winter => Some("winter"),
            Preset::ExclCovid => Some("excl_covid"),
            Preset::AnnualDd | Preset::AnnualDdNever => None,
        }
    }
}
