//! TOML run configuration. Every table rejects unknown keys, and the error
//! message lists the accepted ones.

use std::path::Path;

use serde::Deserialize;
use stagger_core::imputation::{EventStudyOptions, PipelineOptions, VarianceOptions};
use stagger_core::panel::{AnnualRule, LoadOptions, ZeroPolicy};
use stagger_core::sdid::SdidConfig;
use stagger_core::simlab::{DgpConfig, EstimatorSpec, McOptions};
use stagger_core::PeriodId;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub zero_policy: ZeroPolicy,
    pub load: LoadSection,
    pub pipeline: PipelineOptions,
    pub event_study: EventSection,
    pub annual: AnnualSection,
    pub sdid: SdidConfig,
    pub dgp: DgpConfig,
    pub montecarlo: McSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            zero_policy: ZeroPolicy::ImputeOne,
            load: LoadSection::default(),
            pipeline: PipelineOptions::default(),
            event_study: EventSection::default(),
            annual: AnnualSection::default(),
            sdid: SdidConfig::default(),
            dgp: DgpConfig::default(),
            montecarlo: McSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadSection {
    pub fill_gaps: bool,
    pub min_population: Option<u64>,
    pub exclude_units: Vec<String>,
}

impl LoadSection {
    pub fn options(&self) -> LoadOptions {
        LoadOptions {
            fill_gaps: self.fill_gaps,
            min_population: self.min_population,
            exclude_units: self.exclude_units.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSection {
    pub h_pre: i64,
    pub h_post: i64,
}

impl Default for EventSection {
    fn default() -> Self {
        let d = EventStudyOptions::default();
        EventSection { h_pre: d.h_pre, h_post: d.h_post }
    }
}

impl EventSection {
    pub fn options(&self, variance: VarianceOptions) -> EventStudyOptions {
        EventStudyOptions { h_pre: self.h_pre, h_post: self.h_post, variance }
    }
}

/// Two-period comparison: years and the launch windows defining the groups.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnualSection {
    pub pre_year: i32,
    pub post_year: i32,
    pub treated_from: PeriodId,
    pub treated_to: PeriodId,
    pub control_from: PeriodId,
}

impl Default for AnnualSection {
    fn default() -> Self {
        let r = AnnualRule::default();
        AnnualSection {
            pre_year: 2018,
            post_year: 2020,
            treated_from: r.treated_from,
            treated_to: r.treated_to,
            control_from: r.control_from,
        }
    }
}

impl AnnualSection {
    pub fn rule(&self, include_never: bool) -> AnnualRule {
        AnnualRule {
            treated_from: self.treated_from,
            treated_to: self.treated_to,
            control_from: self.control_from,
            include_never,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub reps: usize,
    pub max_failure_rate: f64,
    pub chunk: usize,
    pub estimators: Vec<EstimatorSpec>,
}

impl Default for McSection {
    fn default() -> Self {
        let o = McOptions::default();
        McSection {
            reps: o.reps,
            max_failure_rate: o.max_failure_rate,
            chunk: o.chunk,
            estimators: vec![
                EstimatorSpec::Imputation { scheme: "all_post".into(), pipeline: PipelineOptions::default() },
                EstimatorSpec::Twfe { country_year: false },
            ],
        }
    }
}

impl McSection {
    pub fn options(&self, threads: Option<usize>) -> McOptions {
        McOptions { reps: self.reps, max_failure_rate: self.max_failure_rate, chunk: self.chunk, threads }
    }
}

pub fn parse(text: &str, path: &Path) -> CliResult<RunConfig> {
    toml::from_str(text).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
    parse(&text, path)
}
