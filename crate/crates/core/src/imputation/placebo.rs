//! Placebo launch dates: registries shifted into the past, with every cell
//! at or after the real launch removed so true effects cannot leak in.

use serde::Serialize;

use super::{
    build_cohorts, default_rules, event_study, prepare_sample, EventPoint, EventStudyOptions, Granularity, Imputation,
    SampleOptions,
};
use crate::error::{Error, Result};
use crate::fe::FeMethod;
use crate::panel::{shift_launch_dates, Panel};

pub const PLACEBO_LEVEL: f64 = 0.05;

pub fn placebo_panel(panel: &Panel, shift_months: i64) -> Result<Panel> {
    if shift_months <= 0 {
        return Err(Error::invalid("placebo shift must be a positive number of months"));
    }
    let shifted = shift_launch_dates(panel, shift_months)?;
    Ok(shifted.drop_cells(|u, t| panel.is_treated(u, t)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaceboRun {
    pub shift: i64,
    /// Post-launch placebo coefficients.
    pub points: Vec<EventPoint>,
    pub n_significant: usize,
    pub share_significant: f64,
    pub notices: Vec<String>,
}

impl PlaceboRun {
    /// True when the significant share stays at or below twice the nominal level.
    pub fn passes(&self) -> bool {
        self.share_significant <= 2.0 * PLACEBO_LEVEL
    }
}

/// Event study on the shifted registry; significance is judged on the
/// placebo post coefficients (`h >= 0`) at the 5% level.
pub fn placebo_event_study(
    panel: &Panel,
    shift_months: i64,
    sample: &SampleOptions,
    granularity: Granularity,
    opts: &EventStudyOptions,
) -> Result<PlaceboRun> {
    let p = placebo_panel(panel, shift_months)?;
    let s = prepare_sample(&p, sample)?;
    let cohorts = build_cohorts(&s.panel, granularity, &default_rules(granularity));
    let imp = Imputation::new(&s, None, false, FeMethod::Auto)?;
    let profile = event_study(&imp, &cohorts, opts)?;
    let points: Vec<EventPoint> = profile.post.iter().chain(&profile.pooled_tail).copied().collect();
    if points.is_empty() {
        return Err(Error::EmptySupport(format!("no placebo post coefficients for shift {shift_months}")));
    }
    let n_significant = points.iter().filter(|q| q.ci_low > 0.0 || q.ci_high < 0.0).count();
    let mut notices = s.notices.clone();
    notices.extend(profile.notices);
    Ok(PlaceboRun {
        shift: shift_months,
        share_significant: n_significant as f64 / points.len() as f64,
        n_significant,
        points,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PeriodId, UnitMeta};

    #[test]
    fn shifted_panel_drops_real_post_cells() {
        let units =
            vec![UnitMeta::new("A", "X").with_launch(Some(PeriodId::monthly(2020, 4))), UnitMeta::new("B", "X")];
        let p = Panel::from_counts(PeriodId::monthly(2020, 1), units, &[vec![1.0; 6], vec![1.0; 6]]).unwrap();
        let q = placebo_panel(&p, 2).unwrap();
        assert_eq!(q.units()[0].launch, Some(PeriodId::monthly(2020, 2)));
        assert!(q.cell(0, 2).is_some() && q.cell(0, 3).is_none());
        assert!(q.cell(1, 5).is_some());
        assert!(placebo_panel(&p, 0).is_err());
    }
}
