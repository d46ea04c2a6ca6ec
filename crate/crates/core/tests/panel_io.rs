use std::fs;
use std::path::{Path, PathBuf};

use stagger_core::panel::{load_panel, write_firms_csv, write_panel_csv, write_units_csv, LoadOptions};
use stagger_core::simlab::{generate, DgpConfig};
use stagger_core::{Error, PeriodId};

const UNITS: &str = "unit_id,country,population,latitude,longitude,launch_period,attr:bike_lanes
u1,DE,120000,52.5,13.4,2019-02,0.3
u2,DE,250000,,,,0.1
";

const PANEL: &str = "unit_id,period,accidents,slight_share,slight_source
u1,2019-01,10,,
u1,2019-02,12,0.8,accident_share
u1,2019-03,9,,
u2,2019-01,20,,
u2,2019-02,21,,
u2,2019-03,19,,
";

fn files(dir: &Path, units: &str, panel: &str) -> (PathBuf, PathBuf) {
    let u = dir.join("units.csv");
    let p = dir.join("panel.csv");
    fs::write(&u, units).unwrap();
    fs::write(&p, panel).unwrap();
    (u, p)
}

fn load(units: &str, panel: &str) -> stagger_core::Result<stagger_core::panel::Panel> {
    let dir = tempfile::tempdir().unwrap();
    let (u, p) = files(dir.path(), units, panel);
    load_panel(&u, &p, None, &LoadOptions::default()).map(|r| r.0)
}

#[test]
fn complete_two_by_three() {
    let p = load(UNITS, PANEL).unwrap();
    assert_eq!(p.n_cells(), 6);
    assert_eq!(p.periods()[0], PeriodId::monthly(2019, 1));
    assert_eq!(p.units()[1].launch, None);
    assert_eq!(p.units()[0].attributes["bike_lanes"], 0.3);
    assert!(p.is_treated(0, 1) && !p.is_treated(0, 0));
    assert_eq!(p.cell(0, 1).unwrap().slight_share, Some(0.8));
}

#[test]
fn duplicate_cell() {
    let panel = format!("{PANEL}u1,2019-03,4,,\n");
    assert!(matches!(load(UNITS, &panel), Err(Error::DuplicateCell { .. })));
}

#[test]
fn gap_in_period_axis() {
    let panel = "unit_id,period,accidents,slight_share,slight_source\nu1,2019-01,1,,\nu1,2019-03,2,,\nu2,2019-01,3,,\n";
    assert!(matches!(load(UNITS, panel), Err(Error::NonContiguous { .. })));
}

#[test]
fn bad_rows() {
    let unknown = format!("{PANEL}u9,2019-01,4,,\n");
    assert!(matches!(load(UNITS, &unknown), Err(Error::UnknownUnit(_))));
    let negative = PANEL.replace("u2,2019-02,21", "u2,2019-02,-1");
    assert!(matches!(load(UNITS, &negative), Err(Error::NegativeCount { .. })));
    let malformed = PANEL.replace("u2,2019-02,21", "u2,2019-13,21");
    assert!(matches!(load(UNITS, &malformed), Err(Error::MalformedPeriod(_))));
    let share = PANEL.replace("0.8,accident_share", "1.5,accident_share");
    assert!(load(UNITS, &share).is_err());
}

#[test]
fn missing_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let err =
        load_panel(&dir.path().join("none.csv"), &dir.path().join("p.csv"), None, &LoadOptions::default()).unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains("none.csv"));
}

#[test]
fn firm_launches_attach_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (u, p) = files(dir.path(), UNITS, PANEL);
    let f = dir.path().join("firms.csv");
    fs::write(&f, "unit_id,firm_id,period\nu1,lime,2019-03\nu1,tier,2019-02\n").unwrap();
    let (panel, _) = load_panel(&u, &p, Some(&f), &LoadOptions::default()).unwrap();
    let firms: Vec<&str> = panel.units()[0].firm_launches.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(firms, ["tier", "lime"]);

    fs::write(&f, "unit_id,firm_id,period\nu2,lime,2019-03\n").unwrap();
    assert!(load_panel(&u, &p, Some(&f), &LoadOptions::default()).is_err());
}

#[test]
fn gaps_filled_and_reported() {
    let panel = PANEL.replace("u2,2019-02,21,,\n", "");
    let dir = tempfile::tempdir().unwrap();
    let (u, p) = files(dir.path(), UNITS, &panel);
    let (plain, report) = load_panel(&u, &p, None, &LoadOptions::default()).unwrap();
    assert!(plain.cell(1, 1).is_none());
    assert_eq!(report.missing, vec![("u2".to_string(), PeriodId::monthly(2019, 2))]);
    let opts = LoadOptions { fill_gaps: true, ..Default::default() };
    let (filled, report) = load_panel(&u, &p, None, &opts).unwrap();
    assert_eq!(filled.cell(1, 1).unwrap().accidents, 19.5);
    assert_eq!(report.filled.len(), 1);
    let de = &report.coverage[0];
    assert_eq!((de.units, de.cells, de.missing), (2, 6, 0));
}

#[test]
fn simulated_panel_round_trips() {
    let (panel, _) =
        generate(&DgpConfig { n_units: 12, n_periods: 30, launch_window: (5, 25), ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_units_csv(&panel, &d.join("u.csv")).unwrap();
    write_panel_csv(&panel, &d.join("p.csv")).unwrap();
    write_firms_csv(&panel, &d.join("f.csv")).unwrap();
    let (back, _) =
        load_panel(&d.join("u.csv"), &d.join("p.csv"), Some(&d.join("f.csv")), &LoadOptions::default()).unwrap();
    assert_eq!(back.n_cells(), panel.n_cells());
    for (a, b) in panel.units().iter().zip(back.units()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.launch, b.launch);
        assert_eq!(a.firm_launches, b.firm_launches);
        assert_eq!(a.attributes, b.attributes);
    }
    for (u, t, c) in panel.cells() {
        assert_eq!(back.cell(u, t).unwrap().accidents, c.accidents);
    }
}
