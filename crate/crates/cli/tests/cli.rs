use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stagger(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagger")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Data {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let o = stagger(&["simulate", "--out", root.join("data").to_str().unwrap(), "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Data { _dir: dir, root }
    }

    fn file(&self, name: &str) -> String {
        self.root.join("data").join(name).to_string_lossy().into_owned()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, cmd: &[&str], out: &Path) -> Output {
        let (u, p, f) = (self.file("units.csv"), self.file("panel.csv"), self.file("firms.csv"));
        let mut args = cmd.to_vec();
        args.extend(["--units", &u, "--panel", &p, "--firms", &f, "--out", out.to_str().unwrap()]);
        stagger(&args)
    }
}

#[test]
fn simulate_writes_inputs_and_truth() {
    let d = Data::new();
    for f in ["units.csv", "panel.csv", "firms.csv", "truth.csv", "truth_estimands.csv"] {
        assert!(Path::new(&d.file(f)).exists(), "{f}");
    }
}

#[test]
fn event_study_header_and_tail() {
    let d = Data::new();
    let out = d.out("es");
    assert_eq!(code(&d.run(&["event-study"], &out)), 0);
    let text = std::fs::read_to_string(out.join("event_study.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("h,estimate,se,ci_low,ci_high"));
    let hs: Vec<i64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(hs.first(), Some(&-12));
    assert_eq!(hs.last(), Some(&19));
    assert!(hs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn estimate_as_json() {
    let d = Data::new();
    let out = d.out("est");
    let o = d.run(&["estimate", "--preset", "all_post", "--preset", "winter", "--format", "json"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("estimates.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[1]["preset"], "winter");
    assert!(v[0]["se"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let m = missing.to_str().unwrap();
    let o = stagger(&["estimate", "--units", m, "--panel", m, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.csv"));
}

#[test]
fn unknown_config_key_lists_valid_ones() {
    let d = Data::new();
    let cfg = d.out("bad.toml");
    std::fs::write(&cfg, "seeed = 3\n").unwrap();
    let o = d.run(&["estimate", "--config", cfg.to_str().unwrap()], &d.out("x"));
    assert_eq!(code(&o), 2);
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("seeed") && msg.contains("pipeline"), "{msg}");
}

#[test]
fn non_positive_placebo_shift_is_rejected() {
    let d = Data::new();
    let o = d.run(&["placebo", "--shift", "0"], &d.out("p"));
    assert_eq!(code(&o), 2);
    let o = d.run(&["placebo", "--shift", "-12"], &d.out("p"));
    assert_eq!(code(&o), 2);
}

#[test]
fn estimation_failure_exits_one() {
    let d = Data::new();
    // every simulated unit launches after 2018-05, so this window has no donors
    let o = d.run(&["sdid", "--from", "2018-01", "--to", "2021-06", "--placebo-reps", "0"], &d.out("s"));
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(code(&stagger(&["estimate", "--preset", "nonsense"])), 2);
    assert_eq!(code(&stagger(&["cost-projection", "--effect-pct", "-1", "--baseline", "93.2", "--cost", "61000"])), 2);
    assert_eq!(code(&stagger(&["frobnicate"])), 2);
}

#[test]
fn cost_projection_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = stagger(&[
        "cost-projection",
        "--effect-pct",
        "8.2",
        "--baseline",
        "93.2",
        "--cost",
        "61000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("cost_projection.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[3] - 466_186.4).abs() < 1e-6 && (row[4] - 5_594_236.8).abs() < 1e-6, "{text}");
}

#[test]
fn repeated_runs_are_identical() {
    let d = Data::new();
    let (a, b) = (d.out("a"), d.out("b"));
    assert_eq!(code(&d.run(&["heterogeneity", "--attribute", "x1", "--threads", "1"], &a)), 0);
    assert_eq!(code(&d.run(&["heterogeneity", "--attribute", "x1", "--threads", "3"], &b)), 0);
    let read = |p: &Path| std::fs::read(p.join("heterogeneity.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}
