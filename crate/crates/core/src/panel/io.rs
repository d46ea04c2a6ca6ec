use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;

use super::{OutcomeCell, Panel, SlightSource, UnitMeta};
use crate::error::{Error, Result};
use crate::period::PeriodId;

/// Ingestion filters and gap handling.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fill an isolated missing month with the mean of its two neighbours.
    pub fill_gaps: bool,
    pub min_population: Option<u64>,
    pub exclude_units: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CountryCoverage {
    pub country: String,
    pub units: usize,
    pub cells: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub coverage: Vec<CountryCoverage>,
    pub missing: Vec<(String, PeriodId)>,
    pub filled: Vec<(String, PeriodId)>,
    pub filtered_units: Vec<String>,
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv { path: path.to_path_buf(), message: e.to_string() }
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| csv_err(path, format!("missing column '{name}'")))
}

fn opt_f64(s: &str, what: &str, path: &Path) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| csv_err(path, format!("bad {what} '{s}'")))?;
    if !v.is_finite() {
        return Err(csv_err(path, format!("non-finite {what} '{s}'")));
    }
    Ok(Some(v))
}

fn read_units(path: &Path) -> Result<Vec<UnitMeta>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let id = column(&headers, "unit_id", path)?;
    let country = column(&headers, "country", path)?;
    let population = column(&headers, "population", path)?;
    let lat = column(&headers, "latitude", path)?;
    let lon = column(&headers, "longitude", path)?;
    let launch = column(&headers, "launch_period", path)?;
    let attrs: Vec<(usize, String)> =
        headers.iter().enumerate().filter_map(|(k, h)| h.strip_prefix("attr:").map(|n| (k, n.to_string()))).collect();

    let mut units = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let uid = rec[id].to_string();
        if !seen.insert(uid.clone()) {
            return Err(csv_err(path, format!("duplicate unit '{uid}'")));
        }
        let pop: u64 = rec[population]
            .parse()
            .ok()
            .filter(|&p| p > 0)
            .ok_or_else(|| csv_err(path, format!("unit '{uid}': population must be a positive integer")))?;
        let launch = match &rec[launch] {
            "" => None,
            s => Some(s.parse::<PeriodId>()?),
        };
        let mut attributes = BTreeMap::new();
        for (k, name) in &attrs {
            if let Some(v) = opt_f64(&rec[*k], name, path)? {
                attributes.insert(name.clone(), v);
            }
        }
        units.push(UnitMeta {
            id: uid,
            country: rec[country].to_string(),
            population: pop,
            latitude: opt_f64(&rec[lat], "latitude", path)?,
            longitude: opt_f64(&rec[lon], "longitude", path)?,
            launch,
            firm_launches: Vec::new(),
            attributes,
        });
    }
    Ok(units)
}

struct PanelRow {
    unit: String,
    period: PeriodId,
    cell: OutcomeCell,
}

fn read_panel_rows(path: &Path) -> Result<Vec<PanelRow>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let id = column(&headers, "unit_id", path)?;
    let period = column(&headers, "period", path)?;
    let acc = column(&headers, "accidents", path)?;
    let share = column(&headers, "slight_share", path)?;
    let source = column(&headers, "slight_source", path)?;
    let victim = headers.iter().position(|h| h == "victim_share");

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let unit = rec[id].to_string();
        let period: PeriodId = rec[period].parse()?;
        let accidents: f64 =
            rec[acc].parse().map_err(|_| csv_err(path, format!("bad accident count '{}'", &rec[acc])))?;
        if !accidents.is_finite() || accidents < 0.0 {
            return Err(Error::NegativeCount { unit, period: period.to_string() });
        }
        let slight_share = opt_f64(&rec[share], "slight_share", path)?;
        if let Some(s) = slight_share {
            if !(0.0..=1.0).contains(&s) {
                return Err(csv_err(path, format!("slight_share {s} outside [0,1]")));
            }
        }
        let slight_source = match &rec[source] {
            "" => None,
            s => Some(SlightSource::parse(s).ok_or_else(|| csv_err(path, format!("bad slight_source '{s}'")))?),
        };
        let victim_share = match victim {
            Some(k) => opt_f64(&rec[k], "victim_share", path)?,
            None => None,
        };
        rows.push(PanelRow {
            unit,
            period,
            cell: OutcomeCell { accidents, slight_share, slight_source, victim_share, imputed: false },
        });
    }
    Ok(rows)
}

fn read_firms(path: &Path) -> Result<Vec<(String, String, PeriodId)>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let id = column(&headers, "unit_id", path)?;
    let firm = column(&headers, "firm_id", path)?;
    let period = column(&headers, "period", path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        out.push((rec[id].to_string(), rec[firm].to_string(), rec[period].parse()?));
    }
    Ok(out)
}

/// Read and validate the units, panel and (optional) firm-launch files.
pub fn load_panel(
    units_csv: &Path,
    panel_csv: &Path,
    firm_csv: Option<&Path>,
    options: &LoadOptions,
) -> Result<(Panel, LoadReport)> {
    let mut units = read_units(units_csv)?;
    let rows = read_panel_rows(panel_csv)?;
    let mut report = LoadReport::default();

    if let Some(fp) = firm_csv {
        let index: HashMap<String, usize> = units.iter().enumerate().map(|(k, u)| (u.id.clone(), k)).collect();
        for (uid, firm, period) in read_firms(fp)? {
            let k = *index.get(&uid).ok_or_else(|| Error::UnknownUnit(uid.clone()))?;
            units[k].firm_launches.push((firm, period));
        }
        for u in &mut units {
            u.firm_launches.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
            if u.launch.is_none() && !u.firm_launches.is_empty() {
                return Err(Error::invalid(format!(
                    "unit '{}': firm launches recorded but launch_period is blank",
                    u.id
                )));
            }
        }
    }

    if rows.is_empty() {
        return Err(csv_err(panel_csv, "no observations"));
    }
    let frequency = rows[0].period.frequency();
    if rows.iter().any(|r| r.period.frequency() != frequency) {
        return Err(csv_err(panel_csv, "mixed monthly and annual periods"));
    }
    let first = rows.iter().map(|r| r.period).min().unwrap();
    let last = rows.iter().map(|r| r.period).max().unwrap();
    let observed: BTreeSet<i64> = rows.iter().map(|r| r.period.index()).collect();
    let periods: Vec<PeriodId> = (first.index()..=last.index()).map(|i| PeriodId::from_index(frequency, i)).collect();
    if let Some(gap) = periods.iter().find(|p| !observed.contains(&p.index())) {
        return Err(Error::NonContiguous { missing: gap.to_string() });
    }
    for u in &units {
        let launches = u.launch.iter().chain(u.firm_launches.iter().map(|f| &f.1));
        if launches.into_iter().any(|p| p.frequency() != frequency) {
            return Err(Error::invalid(format!("unit '{}': launch frequency differs from panel", u.id)));
        }
    }

    let np = periods.len();
    let index: HashMap<&str, usize> = units.iter().enumerate().map(|(k, u)| (u.id.as_str(), k)).collect();
    let mut cells: Vec<Option<OutcomeCell>> = vec![None; units.len() * np];
    for row in rows {
        let u = *index.get(row.unit.as_str()).ok_or_else(|| Error::UnknownUnit(row.unit.clone()))?;
        let t = row.period.steps_since(&first) as usize;
        let slot = &mut cells[u * np + t];
        if slot.is_some() {
            return Err(Error::DuplicateCell { unit: row.unit, period: row.period.to_string() });
        }
        *slot = Some(row.cell);
    }

    if options.fill_gaps {
        for u in 0..units.len() {
            for t in 1..np.saturating_sub(1) {
                let k = u * np + t;
                if cells[k].is_none() {
                    if let (Some(a), Some(b)) = (&cells[k - 1], &cells[k + 1]) {
                        let mut c = OutcomeCell::count((a.accidents + b.accidents) / 2.0);
                        c.imputed = true;
                        cells[k] = Some(c);
                        report.filled.push((units[u].id.clone(), periods[t]));
                    }
                }
            }
        }
    }

    let mut panel = Panel::new(frequency, periods, units, cells)?;
    let excluded: BTreeSet<&str> = options.exclude_units.iter().map(String::as_str).collect();
    if options.min_population.is_some() || !excluded.is_empty() {
        let before: Vec<String> = panel.units().iter().map(|u| u.id.clone()).collect();
        panel = panel.filter_units(|u| {
            options.min_population.is_none_or(|m| u.population >= m) && !excluded.contains(u.id.as_str())
        })?;
        let kept: BTreeSet<&str> = panel.units().iter().map(|u| u.id.as_str()).collect();
        report.filtered_units = before.into_iter().filter(|id| !kept.contains(id.as_str())).collect();
    }

    for (u, t) in panel.missing_cells() {
        report.missing.push((panel.units()[u].id.clone(), panel.periods()[t]));
    }
    let mut by_country: BTreeMap<String, CountryCoverage> = BTreeMap::new();
    for (u, meta) in panel.units().iter().enumerate() {
        let e = by_country
            .entry(meta.country.clone())
            .or_insert_with(|| CountryCoverage { country: meta.country.clone(), ..Default::default() });
        e.units += 1;
        for t in 0..panel.n_periods() {
            if panel.cell(u, t).is_some() {
                e.cells += 1;
            } else {
                e.missing += 1;
            }
        }
    }
    report.coverage = by_country.into_values().collect();
    Ok((panel, report))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_units_csv(panel: &Panel, path: &Path) -> Result<()> {
    let names: BTreeSet<&String> = panel.units().iter().flat_map(|u| u.attributes.keys()).collect();
    let mut w = writer(path)?;
    let mut header: Vec<String> =
        ["unit_id", "country", "population", "latitude", "longitude", "launch_period"].map(String::from).to_vec();
    header.extend(names.iter().map(|n| format!("attr:{n}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for u in panel.units() {
        let mut rec = vec![
            u.id.clone(),
            u.country.clone(),
            u.population.to_string(),
            fmt_opt(u.latitude),
            fmt_opt(u.longitude),
            u.launch.map(|l| l.to_string()).unwrap_or_default(),
        ];
        rec.extend(names.iter().map(|n| fmt_opt(u.attributes.get(*n).copied())));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_panel_csv(panel: &Panel, path: &Path) -> Result<()> {
    let with_victim = panel.cells().any(|(_, _, c)| c.victim_share.is_some());
    let mut w = writer(path)?;
    let mut header = vec!["unit_id", "period", "accidents", "slight_share", "slight_source"];
    if with_victim {
        header.push("victim_share");
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (u, t, c) in panel.cells() {
        let mut rec = vec![
            panel.units()[u].id.clone(),
            panel.periods()[t].to_string(),
            c.accidents.to_string(),
            fmt_opt(c.slight_share),
            c.slight_source.map(|s| s.as_str().to_string()).unwrap_or_default(),
        ];
        if with_victim {
            rec.push(fmt_opt(c.victim_share));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_firms_csv(panel: &Panel, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["unit_id", "firm_id", "period"]).map_err(|e| csv_err(path, e))?;
    for u in panel.units() {
        for (firm, p) in &u.firm_launches {
            w.write_record([u.id.as_str(), firm.as_str(), &p.to_string()]).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
