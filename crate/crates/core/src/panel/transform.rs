use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CellGrid, GroupAssignment, OutcomeCell, Panel, Side, SlightSource, UnitMeta};
use crate::error::{Error, Result};
use crate::period::{Frequency, PeriodId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    ImputeOne,
    Drop,
    Fail,
}

pub fn apply_zero_policy(panel: &Panel, policy: ZeroPolicy) -> Result<Panel> {
    let np = panel.n_periods();
    let mut cells = panel.raw_cells().to_vec();
    for (k, slot) in cells.iter_mut().enumerate() {
        let Some(c) = slot else { continue };
        if c.accidents != 0.0 {
            continue;
        }
        match policy {
            ZeroPolicy::ImputeOne => {
                c.accidents = 1.0;
                c.imputed = true;
            }
            ZeroPolicy::Drop => *slot = None,
            ZeroPolicy::Fail => {
                return Err(Error::ZeroCount {
                    unit: panel.units()[k / np].id.clone(),
                    period: panel.periods()[k % np].to_string(),
                })
            }
        }
    }
    Ok(panel.with_cells(cells, true))
}

/// Natural log of accident counts on every observed cell.
pub fn log_outcome(panel: &Panel) -> Result<CellGrid<f64>> {
    let mut out = CellGrid::new(panel.n_units(), panel.n_periods());
    for (u, t, c) in panel.cells() {
        if c.accidents <= 0.0 {
            return Err(Error::ZeroCount { unit: panel.units()[u].id.clone(), period: panel.periods()[t].to_string() });
        }
        out.set(u, t, c.accidents.ln());
    }
    Ok(out)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Split units at their country's median of `attribute`; strictly greater is
/// `Above`, everything else `Below`.
pub fn country_median_split(panel: &Panel, attribute: &str) -> Result<GroupAssignment> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut per_unit = Vec::with_capacity(panel.n_units());
    for u in panel.units() {
        let v = *u
            .attributes
            .get(attribute)
            .ok_or_else(|| Error::MissingValue(format!("attribute '{attribute}' for unit '{}'", u.id)))?;
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite '{attribute}' for unit '{}'", u.id)));
        }
        values.entry(u.country.as_str()).or_default().push(v);
        per_unit.push(v);
    }
    let mut warnings = Vec::new();
    let mut country_medians = BTreeMap::new();
    for (country, vs) in &mut values {
        vs.sort_by(f64::total_cmp);
        if vs.len() == 1 {
            warnings.push(format!("country {country} has a single unit; it is classified below"));
        } else if vs.first() == vs.last() {
            warnings.push(format!("country {country}: all units share the same '{attribute}'; all below"));
        }
        country_medians.insert(country.to_string(), median(vs));
    }
    let side = panel
        .units()
        .iter()
        .zip(&per_unit)
        .map(|(u, v)| if *v > country_medians[&u.country] { Side::Above } else { Side::Below })
        .collect();
    Ok(GroupAssignment { attribute: attribute.to_string(), country_medians, side, warnings })
}

/// Move every launch (and firm launch) `shift_months` months into the past.
pub fn shift_registry(units: &[UnitMeta], shift_months: i64) -> Vec<UnitMeta> {
    units
        .iter()
        .map(|u| {
            let mut u = u.clone();
            u.launch = u.launch.map(|l| l.add_months(-shift_months));
            for f in &mut u.firm_launches {
                f.1 = f.1.add_months(-shift_months);
            }
            u
        })
        .collect()
}

/// Placebo registry: launches shifted `shift_months` into the past.
pub fn shift_launch_dates(panel: &Panel, shift_months: i64) -> Result<Panel> {
    if shift_months == 0 {
        return Err(Error::invalid("launch shift must be nonzero"));
    }
    if panel.frequency() != Frequency::Monthly {
        return Err(Error::invalid("launch shifts require a monthly panel"));
    }
    let units = shift_registry(panel.units(), shift_months);
    let (start, end) = (panel.periods()[0], *panel.periods().last().unwrap());
    let estimable = units.iter().any(|u| u.launch.is_some_and(|l| l > start && l <= end));
    if !estimable {
        return Err(Error::invalid(format!(
            "after shifting by {shift_months} months no launch falls inside the panel"
        )));
    }
    panel.with_units(units)
}

/// Sample rule for the two-period annual comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnualRule {
    /// Units launching within `[treated_from, treated_to]` are treated.
    pub treated_from: PeriodId,
    pub treated_to: PeriodId,
    /// Units launching on or after this month are controls.
    pub control_from: PeriodId,
    pub include_never: bool,
}

impl Default for AnnualRule {
    fn default() -> Self {
        AnnualRule {
            treated_from: PeriodId::monthly(2019, 1),
            treated_to: PeriodId::monthly(2019, 12),
            control_from: PeriodId::monthly(2020, 7),
            include_never: false,
        }
    }
}

/// Collapse a monthly panel to two annual periods with a treated and a
/// control group. Treated units get launch = `post_year`; controls are never
/// treated within the collapsed panel. Units matching neither rule are dropped.
pub fn aggregate_annual(panel: &Panel, pre_year: i32, post_year: i32, rule: &AnnualRule) -> Result<Panel> {
    if panel.frequency() != Frequency::Monthly {
        return Err(Error::invalid("aggregate_annual needs a monthly panel"));
    }
    if pre_year >= post_year {
        return Err(Error::invalid("pre_year must precede post_year"));
    }
    let month_index = |y: i32, m: u8| panel.period_index(&PeriodId::monthly(y, m));
    for y in [pre_year, post_year] {
        if month_index(y, 1).is_none() || month_index(y, 12).is_none() {
            return Err(Error::invalid(format!("panel does not cover {y}")));
        }
    }
    let mut units = Vec::new();
    let mut cells = Vec::new();
    for (u, meta) in panel.units().iter().enumerate() {
        let treated = meta.launch.is_some_and(|l| l >= rule.treated_from && l <= rule.treated_to);
        let control = match meta.launch {
            Some(l) => l >= rule.control_from,
            None => rule.include_never,
        };
        if !treated && !control {
            continue;
        }
        let mut row = Vec::with_capacity(2);
        for y in [pre_year, post_year] {
            let mut total = 0.0;
            for m in 1..=12 {
                let t = month_index(y, m).unwrap();
                let c = panel.cell(u, t).ok_or_else(|| {
                    Error::MissingValue(format!("unit '{}' has no observation for {y}-{m:02}", meta.id))
                })?;
                total += c.accidents;
            }
            row.push(Some(OutcomeCell::count(total)));
        }
        let mut m = meta.clone();
        m.launch = treated.then(|| PeriodId::annual(post_year));
        m.firm_launches.clear();
        units.push(m);
        cells.extend(row);
    }
    if units.is_empty() {
        return Err(Error::invalid("no units satisfy the annual sample rule"));
    }
    Panel::new(Frequency::Annual, vec![PeriodId::annual(pre_year), PeriodId::annual(post_year)], units, cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeverityProjection {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub n_train: usize,
    pub n_projected: usize,
}

/// Map victim-based slight-injury shares onto the accident-based scale with a
/// linear fit on cells that observe both; projections are clamped to [0, 1].
pub fn project_severity_share(panel: &Panel) -> Result<(Panel, SeverityProjection)> {
    let pairs: Vec<(f64, f64)> = panel
        .cells()
        .filter(|(_, _, c)| c.slight_source == Some(SlightSource::AccidentShare))
        .filter_map(|(_, _, c)| Some((c.victim_share?, c.slight_share?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no cells observe both accident and victim shares"));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 1e-14 * n {
        return Err(Error::Singular("victim share is constant in the training set".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };

    let mut n_projected = 0;
    let cells = panel
        .raw_cells()
        .iter()
        .map(|c| {
            let mut c = c.clone()?;
            if c.slight_source == Some(SlightSource::VictimShare) {
                if let Some(v) = c.slight_share {
                    c.slight_share = Some((intercept + slope * v).clamp(0.0, 1.0));
                    c.slight_source = Some(SlightSource::Projected);
                    n_projected += 1;
                }
            }
            Some(c)
        })
        .collect();
    let out = panel.with_cells(cells, panel.zero_policy_applied());
    Ok((out, SeverityProjection { intercept, slope, r_squared, n_train: pairs.len(), n_projected }))
}

/// Centered moving average; near the ends the window shrinks to the
/// available neighbours instead of padding.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "window must be odd");
    let half = window / 2;
    (0..values.len())
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::UnitMeta;
    use proptest::prelude::*;

    fn unit(id: &str, country: &str, launch: Option<(i32, u8)>) -> UnitMeta {
        UnitMeta::new(id, country).with_launch(launch.map(|(y, m)| PeriodId::monthly(y, m)))
    }

    fn small_panel(counts: &[Vec<f64>]) -> Panel {
        let units = (0..counts.len()).map(|k| unit(&format!("u{k}"), "DE", Some((2016, 2)))).collect();
        Panel::from_counts(PeriodId::monthly(2016, 1), units, counts).unwrap()
    }

    #[test]
    fn zero_policy_variants() {
        let p = small_panel(&[vec![0.0, 3.0], vec![2.0, 5.0]]);
        let imputed = apply_zero_policy(&p, ZeroPolicy::ImputeOne).unwrap();
        let c = imputed.cell(0, 0).unwrap();
        assert_eq!(c.accidents, 1.0);
        assert!(c.imputed);
        assert_eq!(apply_zero_policy(&imputed, ZeroPolicy::ImputeOne).unwrap(), imputed);

        let dropped = apply_zero_policy(&p, ZeroPolicy::Drop).unwrap();
        assert!(dropped.cell(0, 0).is_none());
        assert_eq!(dropped.n_cells(), 3);

        let err = apply_zero_policy(&p, ZeroPolicy::Fail).unwrap_err();
        assert!(err.to_string().contains("u0") && err.to_string().contains("2016-01"), "{err}");

        let clean = small_panel(&[vec![1.0, 3.0]]);
        let same = apply_zero_policy(&clean, ZeroPolicy::Fail).unwrap();
        assert_eq!(same.raw_cells(), clean.raw_cells());
    }

    #[test]
    fn log_values() {
        let p = small_panel(&[vec![1.0, 93.0]]);
        let g = log_outcome(&p).unwrap();
        assert_eq!(*g.get(0, 0).unwrap(), 0.0);
        assert!((g.get(0, 1).unwrap() - 4.5326).abs() < 5e-5);
        assert!(log_outcome(&small_panel(&[vec![0.0]])).is_err());
    }

    fn attr_panel(values: &[(&str, f64)]) -> Panel {
        let units: Vec<UnitMeta> = values
            .iter()
            .enumerate()
            .map(|(k, (c, v))| {
                let mut u = unit(&format!("u{k}"), c, None);
                u.attributes.insert("x".into(), *v);
                u
            })
            .collect();
        let counts = vec![vec![1.0]; units.len()];
        Panel::from_counts(PeriodId::monthly(2016, 1), units, &counts).unwrap()
    }

    #[test]
    fn median_split_rules() {
        let g = country_median_split(&attr_panel(&[("A", 1.0), ("A", 2.0), ("A", 3.0)]), "x").unwrap();
        assert_eq!(g.country_medians["A"], 2.0);
        assert_eq!(g.side, vec![Side::Below, Side::Below, Side::Above]);

        let g = country_median_split(&attr_panel(&[("A", 1.0), ("A", 3.0)]), "x").unwrap();
        assert_eq!(g.country_medians["A"], 2.0);
        assert_eq!(g.side, vec![Side::Below, Side::Above]);

        let g = country_median_split(&attr_panel(&[("A", 5.0), ("A", 5.0), ("B", 1.0)]), "x").unwrap();
        assert!(g.side.iter().all(|&s| s == Side::Below));
        assert_eq!(g.warnings.len(), 2);

        assert!(country_median_split(&attr_panel(&[("A", 1.0)]), "missing").is_err());
    }

    #[test]
    fn shifts() {
        let units = vec![unit("a", "DE", Some((2019, 7))), unit("b", "DE", None), unit("c", "DE", Some((2016, 2)))];
        let counts = vec![vec![1.0; 60]; 3];
        let p = Panel::from_counts(PeriodId::monthly(2016, 1), units, &counts).unwrap();
        let s = shift_launch_dates(&p, 12).unwrap();
        assert_eq!(s.units()[0].launch, Some(PeriodId::monthly(2018, 7)));
        assert_eq!(s.units()[1].launch, None);
        let s = shift_launch_dates(&p, 24).unwrap();
        assert_eq!(s.units()[2].launch, Some(PeriodId::monthly(2014, 2)));
        assert!(s.is_treated(2, 0));
        assert!(shift_launch_dates(&p, 0).is_err());
        assert!(shift_launch_dates(&p, 120).is_err());
    }

    #[test]
    fn annual_collapse() {
        // 2018-01 .. 2020-12
        let units = vec![
            unit("t", "DE", Some((2019, 6))),
            unit("late", "DE", Some((2020, 3))),
            unit("c", "DE", Some((2020, 9))),
            unit("n", "DE", None),
        ];
        let counts = vec![vec![10.0; 36]; 4];
        let p = Panel::from_counts(PeriodId::monthly(2018, 1), units, &counts).unwrap();
        let a = aggregate_annual(&p, 2018, 2020, &AnnualRule::default()).unwrap();
        let ids: Vec<&str> = a.units().iter().map(|u| u.id.as_str()).collect();
        assert_eq!(ids, ["t", "c"]);
        assert_eq!(a.cell(0, 0).unwrap().accidents, 120.0);
        assert!(a.is_treated(0, 1) && !a.is_treated(0, 0) && !a.is_treated(1, 1));
        let rule = AnnualRule { include_never: true, ..AnnualRule::default() };
        assert_eq!(aggregate_annual(&p, 2018, 2020, &rule).unwrap().n_units(), 3);

        let gap = p.drop_cells(|u, t| u == 0 && t == 5);
        assert!(aggregate_annual(&gap, 2018, 2020, &AnnualRule::default()).is_err());
    }

    fn share_panel(rows: &[(SlightSource, f64, Option<f64>)]) -> Panel {
        let units = vec![unit("u", "DE", None)];
        let cells = rows
            .iter()
            .map(|&(src, share, victim)| {
                let mut c = OutcomeCell::count(5.0);
                c.slight_source = Some(src);
                c.slight_share = Some(share);
                c.victim_share = victim;
                Some(c)
            })
            .collect();
        let periods = (0..rows.len() as i64).map(|k| PeriodId::monthly(2016, 1).add_months(k)).collect();
        Panel::new(Frequency::Monthly, periods, units, cells).unwrap()
    }

    #[test]
    fn severity_projection() {
        use SlightSource::*;
        let p =
            share_panel(&[(AccidentShare, 0.8, Some(0.8)), (AccidentShare, 0.9, Some(0.9)), (VictimShare, 0.85, None)]);
        let (q, fit) = project_severity_share(&p).unwrap();
        assert!(fit.intercept.abs() < 1e-12 && (fit.slope - 1.0).abs() < 1e-12);
        assert!((q.cell(0, 2).unwrap().slight_share.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(q.cell(0, 2).unwrap().slight_source, Some(Projected));

        // closed-form slope on synthetic pairs
        let pairs = [(0.70, 0.74), (0.80, 0.81), (0.90, 0.93), (0.95, 0.97)];
        let mut rows: Vec<_> = pairs.iter().map(|&(v, a)| (AccidentShare, a, Some(v))).collect();
        rows.push((VictimShare, 0.871, None));
        rows.push((VictimShare, 1.0, None));
        let (q, fit) = project_severity_share(&share_panel(&rows)).unwrap();
        let b = (4.0 * pairs.iter().map(|p| p.0 * p.1).sum::<f64>()
            - pairs.iter().map(|p| p.0).sum::<f64>() * pairs.iter().map(|p| p.1).sum::<f64>())
            / (4.0 * pairs.iter().map(|p| p.0 * p.0).sum::<f64>() - pairs.iter().map(|p| p.0).sum::<f64>().powi(2));
        assert!((fit.slope - b).abs() < 1e-12);
        let projected = q.cell(0, 4).unwrap().slight_share.unwrap();
        assert!((projected - (fit.intercept + fit.slope * 0.871)).abs() < 1e-12);
        assert_eq!(q.cell(0, 5).unwrap().slight_share.unwrap(), 1.0);

        assert!(project_severity_share(&share_panel(&[(VictimShare, 0.8, None)])).is_err());
        let flat = share_panel(&[(AccidentShare, 0.8, Some(0.8)), (AccidentShare, 0.9, Some(0.8))]);
        assert!(project_severity_share(&flat).is_err());
    }

    #[test]
    fn moving_average_edges() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 3);
        assert_eq!(ma, vec![1.5, 2.0, 3.0, 3.5]);
        assert_eq!(moving_average(&[5.0], 3), vec![5.0]);
    }

    proptest! {
        #[test]
        fn median_split_bounds(vals in proptest::collection::vec(0u32..1000, 1..15)) {
            let mut distinct = vals.clone();
            distinct.sort();
            distinct.dedup();
            let values: Vec<(&str, f64)> = distinct.iter().map(|&v| ("C", v as f64)).collect();
            let g = country_median_split(&attr_panel(&values), "x").unwrap();
            prop_assert!(g.count(Side::Above) <= values.len() / 2);
        }

        #[test]
        fn shift_inverse(launches in proptest::collection::vec(proptest::option::of(0i64..60), 1..8), k in 1i64..40) {
            let units: Vec<UnitMeta> = launches.iter().enumerate()
                .map(|(i, l)| unit(&format!("u{i}"), "X", None).with_launch(l.map(|o| PeriodId::monthly(2016, 1).add_months(o))))
                .collect();
            let back = shift_registry(&shift_registry(&units, k), -k);
            prop_assert_eq!(back, units);
        }

        #[test]
        fn annual_conserves(c in proptest::collection::vec(proptest::collection::vec(0u32..200, 36), 2..5)) {
            let units: Vec<UnitMeta> = (0..c.len()).map(|k| unit(&format!("u{k}"), "X", Some((2019, 1 + (k % 12) as u8)))).collect();
            let counts: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let p = Panel::from_counts(PeriodId::monthly(2018, 1), units, &counts).unwrap();
            let a = aggregate_annual(&p, 2018, 2020, &AnnualRule::default()).unwrap();
            let monthly: f64 = counts.iter().map(|r| r[..12].iter().sum::<f64>() + r[24..].iter().sum::<f64>()).sum();
            prop_assert_eq!(a.total_accidents(), monthly);
        }
    }
}
