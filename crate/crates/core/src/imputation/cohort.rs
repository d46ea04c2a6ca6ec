//! Launch cohorts used to build leave-out residuals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::panel::{Frequency, Panel, PeriodId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Quarter,
    HalfYear,
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quarter" => Ok(Self::Quarter),
            "half_year" => Ok(Self::HalfYear),
            _ => Err(format!("unknown cohort granularity `{s}` (expected quarter or half_year)")),
        }
    }
}

/// Applied in order after the calendar label is assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MergeRule {
    Relabel {
        from: String,
        to: String,
    },
    /// Launches at or before `until` get `label`.
    LaunchedThrough {
        until: PeriodId,
        label: String,
    },
    /// Launches at or after `from` get `label`.
    LaunchedFrom {
        from: PeriodId,
        label: String,
    },
}

impl MergeRule {
    fn apply(&self, launch: &PeriodId, label: &mut String) {
        match self {
            MergeRule::Relabel { from, to } if label == from => *label = to.clone(),
            MergeRule::LaunchedThrough { until, label: l } if launch <= until => *label = l.clone(),
            MergeRule::LaunchedFrom { from, label: l } if launch >= from => *label = l.clone(),
            _ => {}
        }
    }
}

/// Quarter cohorts with the two standard merges: the lone 2018Q2 launch
/// joins 2018Q3, and 2021Q1/2021Q2 form one cohort.
pub fn quarter_rules() -> Vec<MergeRule> {
    vec![
        MergeRule::Relabel { from: "2018Q2".into(), to: "2018Q3".into() },
        MergeRule::Relabel { from: "2021Q2".into(), to: "2021Q1".into() },
    ]
}

/// Half-year cohorts: everything through June 2019 is one cohort; launches
/// on or after `late_cutoff` (if given) form a final cohort.
pub fn half_year_rules(late_cutoff: Option<PeriodId>) -> Vec<MergeRule> {
    let mut rules = vec![MergeRule::LaunchedThrough { until: PeriodId::monthly(2019, 6), label: "<=2019H1".into() }];
    if let Some(c) = late_cutoff {
        rules.push(MergeRule::LaunchedFrom { from: c, label: format!(">={c}") });
    }
    rules
}

pub fn default_rules(granularity: Granularity) -> Vec<MergeRule> {
    match granularity {
        Granularity::Quarter => quarter_rules(),
        Granularity::HalfYear => half_year_rules(None),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortMap {
    pub granularity: Granularity,
    pub labels: Vec<String>,
    /// Earliest launch index (months since year 0) per cohort.
    pub starts: Vec<i64>,
    /// Cohort per unit; `None` for never-treated units.
    pub assignment: Vec<Option<usize>>,
    pub warnings: Vec<String>,
}

impl CohortMap {
    pub fn cohort_of(&self, unit: usize) -> Option<usize> {
        self.assignment[unit]
    }

    pub fn n_cohorts(&self) -> usize {
        self.labels.len()
    }

    pub fn size(&self, cohort: usize) -> usize {
        self.assignment.iter().filter(|c| **c == Some(cohort)).count()
    }

    pub fn label_of(&self, unit: usize) -> Option<&str> {
        self.assignment[unit].map(|c| self.labels[c].as_str())
    }
}

fn calendar_label(launch: &PeriodId, granularity: Granularity) -> String {
    match (launch.month, granularity) {
        (None, _) => format!("{}", launch.year),
        (Some(_), Granularity::Quarter) => format!("{}Q{}", launch.year, launch.quarter().unwrap()),
        (Some(_), Granularity::HalfYear) => format!("{}H{}", launch.year, launch.half_year().unwrap()),
    }
}

pub fn build_cohorts(panel: &Panel, granularity: Granularity, rules: &[MergeRule]) -> CohortMap {
    let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (u, meta) in panel.units().iter().enumerate() {
        let Some(launch) = meta.launch else { continue };
        let mut label = calendar_label(&launch, granularity);
        if panel.frequency() == Frequency::Monthly {
            for r in rules {
                r.apply(&launch, &mut label);
            }
        }
        by_label.entry(label).or_default().push(u);
    }
    let start_of = |members: &[usize]| members.iter().map(|&u| panel.units()[u].launch.unwrap().index()).min().unwrap();
    let mut cohorts: Vec<(String, i64, Vec<usize>)> =
        by_label.into_iter().map(|(l, m)| (l.clone(), start_of(&m), m)).collect();
    let mut warnings = Vec::new();
    // merge singletons into the nearest cohort by start time; ties go later
    while cohorts.len() > 1 {
        let Some(k) = cohorts.iter().position(|c| c.2.len() < 2) else { break };
        let s = cohorts[k].1;
        let target = (0..cohorts.len())
            .filter(|&j| j != k)
            .min_by_key(|&j| ((cohorts[j].1 - s).abs(), std::cmp::Reverse(cohorts[j].1)))
            .unwrap();
        let (label, _, members) = cohorts.remove(k);
        let target = if target > k { target - 1 } else { target };
        warnings.push(format!("singleton cohort {label} merged into {}", cohorts[target].0));
        cohorts[target].2.extend(members);
        cohorts[target].1 = start_of(&cohorts[target].2);
    }
    if cohorts.len() == 1 && cohorts[0].2.len() < 2 {
        warnings.push(format!("cohort {} has a single unit", cohorts[0].0));
    }
    cohorts.sort_by_key(|c| (c.1, c.0.clone()));
    let mut assignment = vec![None; panel.n_units()];
    for (k, (_, _, members)) in cohorts.iter().enumerate() {
        for &u in members {
            assignment[u] = Some(k);
        }
    }
    CohortMap {
        granularity,
        labels: cohorts.iter().map(|c| c.0.clone()).collect(),
        starts: cohorts.iter().map(|c| c.1).collect(),
        assignment,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::UnitMeta;

    fn panel(launches: &[(i32, u8)]) -> Panel {
        let units: Vec<UnitMeta> = launches
            .iter()
            .enumerate()
            .map(|(i, &(y, m))| UnitMeta::new(format!("u{i}"), "X").with_launch(Some(PeriodId::monthly(y, m))))
            .collect();
        let counts = vec![vec![5.0; 48]; units.len()];
        Panel::from_counts(PeriodId::monthly(2018, 1), units, &counts).unwrap()
    }

    #[test]
    fn calendar_quarters_and_standard_merges() {
        let p = panel(&[(2018, 5), (2018, 7), (2018, 9), (2019, 7), (2019, 8), (2021, 2), (2021, 5)]);
        let c = build_cohorts(&p, Granularity::Quarter, &quarter_rules());
        assert_eq!(c.label_of(0), Some("2018Q3"));
        assert_eq!(c.label_of(1), Some("2018Q3"));
        assert_eq!(c.label_of(3), Some("2019Q3"));
        assert_eq!(c.label_of(5), c.label_of(6));
        assert!(c.warnings.is_empty());
        assert!((0..c.n_cohorts()).all(|k| c.size(k) >= 2));
    }

    #[test]
    fn singleton_goes_to_nearest_later_on_tie() {
        let p = panel(&[(2018, 12), (2018, 12), (2019, 1), (2019, 4), (2019, 4)]);
        let c = build_cohorts(&p, Granularity::Quarter, &[]);
        assert_eq!(c.label_of(2), Some("2018Q4"));
        let p = panel(&[(2018, 12), (2018, 12), (2019, 2), (2019, 4), (2019, 4), (2019, 3)]);
        let c = build_cohorts(&p, Granularity::Quarter, &[]);
        assert_eq!(c.size(c.cohort_of(2).unwrap()), 2);
        // tie: Feb is two months from both Dec and Apr
        let p = panel(&[(2018, 12), (2018, 12), (2019, 2), (2019, 4), (2019, 4)]);
        let c = build_cohorts(&p, Granularity::Quarter, &[]);
        assert_eq!(c.label_of(2), Some("2019Q2"));
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn half_year_rules() {
        let p = panel(&[(2018, 7), (2019, 6), (2019, 7), (2019, 12), (2021, 1), (2021, 3)]);
        let c = build_cohorts(&p, Granularity::HalfYear, &super::half_year_rules(Some(PeriodId::monthly(2021, 1))));
        assert_eq!(c.label_of(0), Some("<=2019H1"));
        assert_eq!(c.label_of(1), Some("<=2019H1"));
        assert_eq!(c.label_of(2), Some("2019H2"));
        assert_eq!(c.label_of(5), Some(">=2021-01"));
    }
}
