//! Estimands as weights over treated cells.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::CellEffects;
use crate::error::{Error, Result};
use crate::panel::{Panel, PeriodId, Side};

pub const WINTER_MONTHS: [u8; 4] = [11, 12, 1, 2];
pub const NON_WINTER_MONTHS: [u8; 8] = [3, 4, 5, 6, 7, 8, 9, 10];

/// Months excluded by the COVID filter: 2020-03..2020-05 and 2020-11..2021-05.
pub fn covid_periods() -> BTreeSet<PeriodId> {
    let mut s = BTreeSet::new();
    for m in 3..=5 {
        s.insert(PeriodId::monthly(2020, m));
    }
    let mut p = PeriodId::monthly(2020, 11);
    while p <= PeriodId::monthly(2021, 5) {
        s.insert(p);
        p = p.add_months(1);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    AverageAllPost,
    /// Event times `0..k`.
    FirstKMonths(i64),
    Season(BTreeSet<u8>),
    EventTime(i64),
    /// Event times `h >= from`, pooled.
    EventTimeFrom(i64),
    CalendarExclude(BTreeSet<PeriodId>),
    /// Equal weight within one side of a split.
    GroupSide(Side),
    /// `+1` spread over `positive`, `-1` over the other side.
    GroupContrast(Side),
    /// Raw weights keyed by `(unit, period)`; cells without an effect are ignored.
    Custom(BTreeMap<(usize, usize), f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightScheme {
    pub name: String,
    pub kind: SchemeKind,
}

impl WeightScheme {
    pub fn new(name: impl Into<String>, kind: SchemeKind) -> Self {
        WeightScheme { name: name.into(), kind }
    }

    pub fn all_post() -> Self {
        Self::new("all_post", SchemeKind::AverageAllPost)
    }

    pub fn first_12() -> Self {
        Self::new("first_12", SchemeKind::FirstKMonths(12))
    }

    pub fn winter() -> Self {
        Self::new("winter", SchemeKind::Season(WINTER_MONTHS.into_iter().collect()))
    }

    pub fn non_winter() -> Self {
        Self::new("non_winter", SchemeKind::Season(NON_WINTER_MONTHS.into_iter().collect()))
    }

    pub fn excl_covid() -> Self {
        Self::new("excl_covid", SchemeKind::CalendarExclude(covid_periods()))
    }

    pub fn event_time(h: i64) -> Self {
        Self::new(format!("h{h}"), SchemeKind::EventTime(h))
    }

    /// Named presets: `all_post`, `first_12`, `winter`, `non_winter`,
    /// `excl_covid`, `contrast` (above minus below) and `h<k>` for one event time.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "all_post" => Some(Self::all_post()),
            "first_12" => Some(Self::first_12()),
            "winter" => Some(Self::winter()),
            "non_winter" => Some(Self::non_winter()),
            "excl_covid" => Some(Self::excl_covid()),
            "contrast" => Some(Self::new("contrast", SchemeKind::GroupContrast(Side::Above))),
            _ => name.strip_prefix('h').and_then(|h| h.parse().ok()).filter(|h: &i64| *h >= 0).map(Self::event_time),
        }
    }

    pub fn is_contrast(&self) -> bool {
        matches!(self.kind, SchemeKind::GroupContrast(_))
    }

    /// Weights aligned with `effects.cells`. Non-contrast schemes are
    /// renormalized to sum to one over the cells that have an effect;
    /// contrast schemes sum to `+1` and `-1` over the two sides.
    pub fn weights(&self, panel: &Panel, effects: &CellEffects, sides: Option<&[Side]>) -> Result<Vec<f64>> {
        let cells = &effects.cells;
        let side_of = |u: usize| -> Result<Side> {
            sides.map(|s| s[u]).ok_or_else(|| Error::invalid(format!("scheme {} needs a group split", self.name)))
        };
        let mut w = vec![0.0; cells.len()];
        match &self.kind {
            SchemeKind::Custom(map) => {
                for (k, c) in cells.iter().enumerate() {
                    w[k] = map.get(&(c.unit, c.period)).copied().unwrap_or(0.0);
                }
                if w.iter().all(|&x| x == 0.0) {
                    return Err(Error::EmptySupport(self.name.clone()));
                }
                return Ok(w);
            }
            SchemeKind::GroupContrast(pos) => {
                let mut n = [0usize; 2];
                for c in cells {
                    n[side_of(c.unit)?.index()] += 1;
                }
                if n[0] == 0 || n[1] == 0 {
                    return Err(Error::EmptySupport(format!("{}: a side has no treated cells", self.name)));
                }
                for (k, c) in cells.iter().enumerate() {
                    let s = side_of(c.unit)?;
                    let sign = if s == *pos { 1.0 } else { -1.0 };
                    w[k] = sign / n[s.index()] as f64;
                }
                return Ok(w);
            }
            _ => {}
        }
        for (k, c) in cells.iter().enumerate() {
            let p = panel.periods()[c.period];
            let inside = match &self.kind {
                SchemeKind::AverageAllPost => true,
                SchemeKind::FirstKMonths(k) => c.event_time < *k,
                SchemeKind::Season(months) => p.month.is_some_and(|m| months.contains(&m)),
                SchemeKind::EventTime(h) => c.event_time == *h,
                SchemeKind::EventTimeFrom(h) => c.event_time >= *h,
                SchemeKind::CalendarExclude(set) => !set.contains(&p),
                SchemeKind::GroupSide(s) => side_of(c.unit)? == *s,
                SchemeKind::GroupContrast(_) | SchemeKind::Custom(_) => unreachable!(),
            };
            if inside {
                w[k] = 1.0;
            }
        }
        let n = w.iter().filter(|&&x| x > 0.0).count();
        if n == 0 {
            return Err(Error::EmptySupport(self.name.clone()));
        }
        for x in &mut w {
            *x /= n as f64;
        }
        Ok(w)
    }
}

/// `Σ w_k τ̂_k`.
pub fn aggregate(effects: &CellEffects, weights: &[f64]) -> Result<f64> {
    if weights.len() != effects.cells.len() {
        return Err(Error::invalid("weights do not align with cell effects"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::EmptySupport("all weights are zero".into()));
    }
    Ok(effects.cells.iter().zip(weights).map(|(c, w)| w * c.tau).sum())
}
