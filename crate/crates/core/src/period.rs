use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Monthly,
    Annual,
}

/// A calendar month (`YYYY-MM`) or a calendar year (`YYYY`).
///
/// Periods of one frequency are totally ordered and map onto a dense integer
/// index, which is what all arithmetic goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PeriodId {
    pub year: i32,
    pub month: Option<u8>,
}

impl From<PeriodId> for String {
    fn from(p: PeriodId) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for PeriodId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl PeriodId {
    pub fn monthly(year: i32, month: u8) -> Self {
        assert!((1..=12).contains(&month), "month out of range: {month}");
        PeriodId { year, month: Some(month) }
    }

    pub fn annual(year: i32) -> Self {
        PeriodId { year, month: None }
    }

    pub fn frequency(&self) -> Frequency {
        if self.month.is_some() {
            Frequency::Monthly
        } else {
            Frequency::Annual
        }
    }

    /// Months since year 0 for monthly periods, the year for annual ones.
    pub fn index(&self) -> i64 {
        match self.month {
            Some(m) => self.year as i64 * 12 + (m as i64 - 1),
            None => self.year as i64,
        }
    }

    pub fn from_index(frequency: Frequency, index: i64) -> Self {
        match frequency {
            Frequency::Monthly => {
                let year = index.div_euclid(12);
                let month = index.rem_euclid(12) + 1;
                PeriodId::monthly(year as i32, month as u8)
            }
            Frequency::Annual => PeriodId::annual(index as i32),
        }
    }

    /// Shift by `k` steps of the period's own frequency.
    pub fn step(&self, k: i64) -> Self {
        PeriodId::from_index(self.frequency(), self.index() + k)
    }

    pub fn add_months(&self, k: i64) -> Self {
        assert!(self.month.is_some(), "add_months on an annual period");
        self.step(k)
    }

    /// Signed number of steps from `other` to `self`.
    pub fn steps_since(&self, other: &PeriodId) -> i64 {
        self.index() - other.index()
    }

    /// Calendar quarter 1..=4 of a monthly period.
    pub fn quarter(&self) -> Option<u8> {
        self.month.map(|m| (m - 1) / 3 + 1)
    }

    pub fn half_year(&self) -> Option<u8> {
        self.month.map(|m| if m <= 6 { 1 } else { 2 })
    }

    /// April through September.
    pub fn is_summer(&self) -> bool {
        matches!(self.month, Some(4..=9))
    }
}

impl fmt::Display for PeriodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.month {
            Some(m) => write!(f, "{:04}-{:02}", self.year, m),
            None => write!(f, "{:04}", self.year),
        }
    }
}

impl FromStr for PeriodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::MalformedPeriod(s.to_string());
        let s = s.trim();
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        match s.split_once('-') {
            Some((y, m)) => {
                if y.len() != 4 || m.len() != 2 || !digits(y) || !digits(m) {
                    return Err(bad());
                }
                let year: i32 = y.parse().map_err(|_| bad())?;
                let month: u8 = m.parse().map_err(|_| bad())?;
                if !(1..=12).contains(&month) {
                    return Err(bad());
                }
                Ok(PeriodId::monthly(year, month))
            }
            None => {
                if s.len() != 4 || !digits(s) {
                    return Err(bad());
                }
                Ok(PeriodId::annual(s.parse().map_err(|_| bad())?))
            }
        }
    }
}
