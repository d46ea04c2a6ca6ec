//! City-month panels: data model, CSV ingestion and deterministic transforms.

mod io;
mod transform;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{load_panel, write_firms_csv, write_panel_csv, write_units_csv, LoadOptions, LoadReport};
pub use transform::{
    aggregate_annual, apply_zero_policy, country_median_split, log_outcome, moving_average, project_severity_share,
    shift_launch_dates, shift_registry, AnnualRule, SeverityProjection, ZeroPolicy,
};

use crate::error::{Error, Result};
pub use crate::period::{Frequency, PeriodId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMeta {
    pub id: String,
    pub country: String,
    pub population: u64,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    /// First launch; `None` means never treated.
    pub launch: Option<PeriodId>,
    pub firm_launches: Vec<(String, PeriodId)>,
    pub attributes: BTreeMap<String, f64>,
}

impl UnitMeta {
    pub fn new(id: impl Into<String>, country: impl Into<String>) -> Self {
        UnitMeta {
            id: id.into(),
            country: country.into(),
            population: 1,
            latitude: None,
            longitude: None,
            launch: None,
            firm_launches: Vec::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_launch(mut self, launch: Option<PeriodId>) -> Self {
        self.launch = launch;
        self
    }

    pub fn is_treated_at(&self, period: &PeriodId) -> bool {
        self.launch.is_some_and(|l| l <= *period)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlightSource {
    AccidentShare,
    VictimShare,
    Projected,
}

impl SlightSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            SlightSource::AccidentShare => "accident_share",
            SlightSource::VictimShare => "victim_share",
            SlightSource::Projected => "projected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "accident_share" => Some(SlightSource::AccidentShare),
            "victim_share" => Some(SlightSource::VictimShare),
            "projected" => Some(SlightSource::Projected),
            _ => None,
        }
    }
}

/// One city-month observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCell {
    /// Accident count. Integral for ingested data; simulated panels may carry
    /// continuous values when rounding is switched off.
    pub accidents: f64,
    pub slight_share: Option<f64>,
    pub slight_source: Option<SlightSource>,
    /// Victim-based share observed alongside an accident-based share; only
    /// used to train the severity projection.
    pub victim_share: Option<f64>,
    /// Set when a zero count was replaced or the cell was gap-filled.
    pub imputed: bool,
}

impl OutcomeCell {
    pub fn count(accidents: f64) -> Self {
        OutcomeCell { accidents, slight_share: None, slight_source: None, victim_share: None, imputed: false }
    }
}

/// Units × contiguous periods, with a cell or an explicit gap at every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    frequency: Frequency,
    periods: Vec<PeriodId>,
    units: Vec<UnitMeta>,
    cells: Vec<Option<OutcomeCell>>,
    zero_policy_applied: bool,
}

impl Panel {
    /// Build a panel; `cells` is unit-major (`unit * n_periods + period`).
    pub fn new(
        frequency: Frequency,
        periods: Vec<PeriodId>,
        units: Vec<UnitMeta>,
        cells: Vec<Option<OutcomeCell>>,
    ) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::invalid("panel has no periods"));
        }
        if cells.len() != periods.len() * units.len() {
            return Err(Error::invalid(format!(
                "cell grid has {} entries, expected {}",
                cells.len(),
                periods.len() * units.len()
            )));
        }
        if periods.iter().any(|p| p.frequency() != frequency) {
            return Err(Error::invalid("period frequency does not match panel frequency"));
        }
        if periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("periods must be strictly increasing"));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &units {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::invalid(format!("duplicate unit id '{}'", u.id)));
            }
            if u.attributes.values().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite attribute for unit '{}'", u.id)));
            }
            if let (Some(l), Some(first)) = (u.launch, u.firm_launches.iter().map(|f| f.1).min()) {
                if l != first {
                    return Err(Error::invalid(format!(
                        "unit '{}': launch {} differs from first firm launch {}",
                        u.id, l, first
                    )));
                }
            }
        }
        for (k, c) in cells.iter().enumerate() {
            if let Some(c) = c {
                if !c.accidents.is_finite() || c.accidents < 0.0 {
                    let (u, t) = (k / periods.len(), k % periods.len());
                    return Err(Error::NegativeCount { unit: units[u].id.clone(), period: periods[t].to_string() });
                }
                if let Some(s) = c.slight_share {
                    if !(0.0..=1.0).contains(&s) {
                        return Err(Error::invalid(format!("slight share {s} outside [0,1]")));
                    }
                }
            }
        }
        Ok(Panel { frequency, periods, units, cells, zero_policy_applied: false })
    }

    /// Complete monthly panel from a dense `units × periods` count matrix.
    pub fn from_counts(start: PeriodId, units: Vec<UnitMeta>, counts: &[Vec<f64>]) -> Result<Self> {
        let n_periods = counts.first().map_or(0, |r| r.len());
        if counts.len() != units.len() || counts.iter().any(|r| r.len() != n_periods) {
            return Err(Error::invalid("count matrix does not match units"));
        }
        let periods = (0..n_periods as i64).map(|k| start.step(k)).collect();
        let cells = counts.iter().flat_map(|row| row.iter().map(|&a| Some(OutcomeCell::count(a)))).collect();
        Panel::new(start.frequency(), periods, units, cells)
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn periods(&self) -> &[PeriodId] {
        &self.periods
    }

    pub fn units(&self) -> &[UnitMeta] {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn zero_policy_applied(&self) -> bool {
        self.zero_policy_applied
    }

    pub fn cell(&self, unit: usize, period: usize) -> Option<&OutcomeCell> {
        self.cells[unit * self.periods.len() + period].as_ref()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &OutcomeCell)> {
        let np = self.periods.len();
        self.cells.iter().enumerate().filter_map(move |(k, c)| c.as_ref().map(|c| (k / np, k % np, c)))
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let np = self.periods.len();
        self.cells.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(k, _)| (k / np, k % np)).collect()
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u.id == id)
    }

    pub fn period_index(&self, p: &PeriodId) -> Option<usize> {
        self.periods.binary_search(p).ok()
    }

    /// Treatment indicator `d_it = [launch_i <= t]`.
    pub fn is_treated(&self, unit: usize, period: usize) -> bool {
        self.units[unit].is_treated_at(&self.periods[period])
    }

    /// Launch position relative to the period axis: the index of the first
    /// treated period, which may lie outside `0..n_periods`.
    pub fn launch_offset(&self, unit: usize) -> Option<i64> {
        let l = self.units[unit].launch?;
        match self.frequency {
            Frequency::Monthly => {
                let l = if l.month.is_none() { PeriodId::monthly(l.year, 1) } else { l };
                Some(l.steps_since(&self.periods[0]))
            }
            Frequency::Annual => {
                // first axis period at or after the launch
                Some(self.periods.iter().position(|p| *p >= l).map_or(self.periods.len() as i64, |k| k as i64))
            }
        }
    }

    /// Event time `t - launch` in periods, for treated units.
    pub fn event_time(&self, unit: usize, period: usize) -> Option<i64> {
        let l = self.units[unit].launch?;
        match self.frequency {
            Frequency::Monthly => Some(self.periods[period].steps_since(&l)),
            Frequency::Annual => self.launch_offset(unit).map(|o| period as i64 - o),
        }
    }

    pub fn ever_treated_units(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&u| self.units[u].launch.is_some()).collect()
    }

    pub fn total_accidents(&self) -> f64 {
        self.cells().map(|(_, _, c)| c.accidents).sum()
    }

    pub(crate) fn with_units(&self, units: Vec<UnitMeta>) -> Result<Panel> {
        let mut p = Panel::new(self.frequency, self.periods.clone(), units, self.cells.clone())?;
        p.zero_policy_applied = self.zero_policy_applied;
        Ok(p)
    }

    pub(crate) fn with_cells(&self, cells: Vec<Option<OutcomeCell>>, zero_policy_applied: bool) -> Panel {
        Panel {
            frequency: self.frequency,
            periods: self.periods.clone(),
            units: self.units.clone(),
            cells,
            zero_policy_applied,
        }
    }

    pub(crate) fn raw_cells(&self) -> &[Option<OutcomeCell>] {
        &self.cells
    }

    /// Keep the units for which `keep` returns true.
    pub fn filter_units(&self, mut keep: impl FnMut(&UnitMeta) -> bool) -> Result<Panel> {
        let np = self.periods.len();
        let mut units = Vec::new();
        let mut cells = Vec::new();
        for (u, meta) in self.units.iter().enumerate() {
            if keep(meta) {
                units.push(meta.clone());
                cells.extend_from_slice(&self.cells[u * np..(u + 1) * np]);
            }
        }
        let mut p = Panel::new(self.frequency, self.periods.clone(), units, cells)?;
        p.zero_policy_applied = self.zero_policy_applied;
        Ok(p)
    }

    /// Mark cells for which `drop` returns true as missing.
    pub fn drop_cells(&self, mut drop: impl FnMut(usize, usize) -> bool) -> Panel {
        let np = self.periods.len();
        let cells =
            self.cells.iter().enumerate().map(|(k, c)| if drop(k / np, k % np) { None } else { c.clone() }).collect();
        self.with_cells(cells, self.zero_policy_applied)
    }

    /// Restrict the period axis to `[from, to]` (inclusive).
    pub fn window(&self, from: PeriodId, to: PeriodId) -> Result<Panel> {
        let keep: Vec<usize> =
            (0..self.periods.len()).filter(|&t| self.periods[t] >= from && self.periods[t] <= to).collect();
        if keep.is_empty() {
            return Err(Error::invalid(format!("window {from}..{to} contains no panel periods")));
        }
        let periods = keep.iter().map(|&t| self.periods[t]).collect();
        let np = self.periods.len();
        let cells = (0..self.units.len())
            .flat_map(|u| keep.iter().map(move |&t| u * np + t))
            .map(|k| self.cells[k].clone())
            .collect();
        let mut p = Panel::new(self.frequency, periods, self.units.clone(), cells)?;
        p.zero_policy_applied = self.zero_policy_applied;
        Ok(p)
    }
}

/// Value grid aligned with a panel's cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid<T> {
    n_periods: usize,
    data: Vec<Option<T>>,
}

impl<T: Clone> CellGrid<T> {
    pub fn new(n_units: usize, n_periods: usize) -> Self {
        CellGrid { n_periods, data: vec![None; n_units * n_periods] }
    }

    pub fn get(&self, unit: usize, period: usize) -> Option<&T> {
        self.data[unit * self.n_periods + period].as_ref()
    }

    pub fn set(&mut self, unit: usize, period: usize, value: T) {
        self.data[unit * self.n_periods + period] = Some(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let np = self.n_periods;
        self.data.iter().enumerate().filter_map(move |(k, v)| v.as_ref().map(|v| (k / np, k % np, v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Below,
    Above,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Below => 0,
            Side::Above => 1,
        }
    }
}

/// Within-country median split of one unit attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub attribute: String,
    pub country_medians: BTreeMap<String, f64>,
    /// Indexed like the panel's units.
    pub side: Vec<Side>,
    pub warnings: Vec<String>,
}

impl GroupAssignment {
    pub fn count(&self, side: Side) -> usize {
        self.side.iter().filter(|&&s| s == side).count()
    }
}
