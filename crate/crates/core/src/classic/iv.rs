//! Instruments from country-demeaned unit attributes interacted with launch
//! activity elsewhere in the same country.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{estimate_from, log_counts, observed, panel_terms, ExtraFe};
use crate::error::{Error, Result};
use crate::fe::{tsls_fit, Absorber, DesignMatrix, FeMethod};
use crate::imputation::EffectEstimate;
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDriver {
    /// Any other unit of the country has launched by `t`.
    #[default]
    AnyNationalLaunch,
    /// Number of firm launches by `t` in other units of the country.
    NationalFirmCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvInstrumentSet {
    pub base_attributes: Vec<String>,
    pub time_driver: TimeDriver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IvMargin {
    #[default]
    Binary,
    /// Number of active firms in the unit.
    FirmCount,
}

fn firms_by(panel: &Panel, u: usize, t: usize) -> usize {
    let p = panel.periods()[t];
    panel.units()[u].firm_launches.iter().filter(|(_, l)| *l <= p).count()
}

/// One instrument column per attribute, rows in observed-cell order.
pub fn build_instruments(panel: &Panel, spec: &IvInstrumentSet) -> Result<DesignMatrix> {
    if spec.base_attributes.is_empty() {
        return Err(Error::invalid("instrument set needs at least one attribute"));
    }
    if spec.time_driver == TimeDriver::NationalFirmCount && panel.units().iter().all(|u| u.firm_launches.is_empty()) {
        return Err(Error::invalid("firm-count driver needs the firm launch registry"));
    }
    let units = panel.units();
    let mut by_country: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (u, m) in units.iter().enumerate() {
        by_country.entry(m.country.as_str()).or_default().push(u);
    }
    let mut demeaned = Vec::new();
    for a in &spec.base_attributes {
        let mut col = vec![0.0; units.len()];
        for members in by_country.values() {
            let vals: Vec<f64> = members
                .iter()
                .map(|&u| {
                    units[u]
                        .attributes
                        .get(a)
                        .copied()
                        .ok_or_else(|| Error::MissingValue(format!("attribute '{a}' for unit '{}'", units[u].id)))
                })
                .collect::<Result<_>>()?;
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            for (&u, v) in members.iter().zip(vals) {
                col[u] = v - mean;
            }
        }
        demeaned.push(col);
    }
    let rows = observed(panel);
    let driver: Vec<f64> = rows
        .iter()
        .map(|&(u, t)| {
            let others = by_country[units[u].country.as_str()].iter().filter(|&&o| o != u);
            match spec.time_driver {
                TimeDriver::AnyNationalLaunch => {
                    f64::from(u8::from(others.into_iter().any(|&o| panel.is_treated(o, t))))
                }
                TimeDriver::NationalFirmCount => others.map(|&o| firms_by(panel, o, t)).sum::<usize>() as f64,
            }
        })
        .collect();
    let columns =
        demeaned.iter().map(|col| rows.iter().zip(&driver).map(|(&(u, _), d)| col[u] * d).collect()).collect();
    let names = spec.base_attributes.iter().map(|a| format!("{a}_x_driver")).collect();
    DesignMatrix::new(names, columns, rows.iter().map(|&(u, _)| u).collect(), vec![1.0; rows.len()])
}

#[derive(Debug, Clone, Serialize)]
pub struct IvResult {
    pub estimate: EffectEstimate,
    pub first_stage_f: f64,
    pub warnings: Vec<String>,
}

pub fn iv_dd(panel: &Panel, spec: &IvInstrumentSet, extra: ExtraFe, margin: IvMargin) -> Result<IvResult> {
    let z = build_instruments(panel, spec)?;
    let rows = observed(panel);
    let y = log_counts(panel, &rows)?;
    let endog: Vec<f64> = rows
        .iter()
        .map(|&(u, t)| match margin {
            IvMargin::Binary => f64::from(u8::from(panel.is_treated(u, t))),
            IvMargin::FirmCount => firms_by(panel, u, t) as f64,
        })
        .collect();
    let absorber = Absorber::new(panel_terms(panel, &rows, extra), vec![1.0; rows.len()], FeMethod::Auto)?;
    let fit = tsls_fit(&y, &endog, &z, &absorber)?;
    let mut warnings = Vec::new();
    if fit.first_stage_f < 10.0 {
        warnings.push(format!("weak first stage: F = {:.2}", fit.first_stage_f));
    }
    let name = match margin {
        IvMargin::Binary => "iv_binary",
        IvMargin::FirmCount => "iv_firm_count",
    };
    let n_treated = endog.iter().filter(|&&v| v > 0.0).count();
    Ok(IvResult {
        estimate: estimate_from(name, fit.estimate, fit.se, rows.len(), panel.n_units(), n_treated),
        first_stage_f: fit.first_stage_f,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PeriodId, UnitMeta};

    #[test]
    fn hand_built_three_units() {
        let mk = |id: &str, x: f64, launch: Option<PeriodId>| {
            let mut u = UnitMeta::new(id, "X").with_launch(launch);
            u.attributes.insert("x".into(), x);
            u
        };
        let units = vec![mk("a", 1.0, Some(PeriodId::monthly(2020, 2))), mk("b", 2.0, None), mk("c", 6.0, None)];
        let p = Panel::from_counts(PeriodId::monthly(2020, 1), units, &vec![vec![5.0; 3]; 3]).unwrap();
        let spec = IvInstrumentSet { base_attributes: vec!["x".into()], time_driver: TimeDriver::AnyNationalLaunch };
        let z = build_instruments(&p, &spec).unwrap();
        // mean 3: demeaned (-2, -1, 3); driver is 0 for a (own launch excluded), 1 for b and c from t = 1
        assert_eq!(z.columns[0], vec![0.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 3.0, 3.0]);

        // shifting the raw attribute leaves the instrument unchanged
        let shifted: Vec<UnitMeta> = p
            .units()
            .iter()
            .map(|u| {
                let mut u = u.clone();
                *u.attributes.get_mut("x").unwrap() += 10.0;
                u
            })
            .collect();
        let p2 = Panel::from_counts(PeriodId::monthly(2020, 1), shifted, &vec![vec![5.0; 3]; 3]).unwrap();
        assert_eq!(build_instruments(&p2, &spec).unwrap().columns, z.columns);
    }

    #[test]
    fn missing_attribute() {
        let p = Panel::from_counts(PeriodId::monthly(2020, 1), vec![UnitMeta::new("a", "X")], &[vec![1.0]]).unwrap();
        let spec = IvInstrumentSet { base_attributes: vec!["x".into()], time_driver: TimeDriver::AnyNationalLaunch };
        assert!(matches!(build_instruments(&p, &spec), Err(Error::MissingValue(_))));
    }
}
