use std::path::{Path, PathBuf};
use std::process::Command;

use freqsync::channel::{resolve_delays, DelaySpec};
use freqsync::fivebus;
use freqsync::network::Topology;
use freqsync_cli::commands::{evaluate, execute, oracle_csv, sweep, LoadOptions, EXIT_INTEGRATION, EXIT_THRESHOLD};
use freqsync_cli::scenario::{apply_override, Outcome};
use freqsync_cli::{parse_scenario, parse_scenario_str, serialize_scenario, ConfigError, Scenario};
use proptest::prelude::*;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn load(name: &str, overrides: &[&str]) -> Scenario {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_scenario(&scenario_path(name), &o).unwrap()
}

const BUNDLED: [&str; 9] = [
    "fivebus_table2",
    "fivebus_naive_delay",
    "fivebus_reform_delay",
    "fivebus_scatter_delay",
    "fivebus_tieline",
    "fivebus_bounds",
    "fivebus_observer",
    "fivebus_disturbance_decay",
    "fivebus_disturbance_awgn",
];

#[test]
fn benchmark_file_carries_the_reference_values() {
    let m = load("fivebus_table2", &[]).model().unwrap();
    let r = fivebus::model();
    assert_eq!(m.n_buses(), 5);
    for (a, b) in m.buses.iter().zip(&r.buses) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.damping, b.damping);
        assert_eq!(a.demand, b.demand);
        match (&a.generator, &b.generator) {
            (Some(x), Some(y)) => {
                assert_eq!((x.inertia, x.tau, x.k_g, x.k_c), (y.inertia, y.tau, y.k_g, y.k_c));
                assert_eq!(x.cost.as_quadratic(), y.cost.as_quadratic());
            }
            (None, None) => {}
            _ => panic!("generator placement differs at bus {}", a.label),
        }
    }
    assert_eq!(m.phys_lines, r.phys_lines);
    assert_eq!(m.comm_lines, r.comm_lines);
    assert_eq!(m.areas, r.areas);
}

#[test]
fn every_bundled_scenario_round_trips() {
    for name in BUNDLED {
        let s = load(name, &[]);
        let again = parse_scenario_str(&serialize_scenario(&s), &[]).unwrap();
        assert_eq!(s, again, "{name}");
    }
}

#[test]
fn empty_file_names_missing_section() {
    let e = parse_scenario_str("", &[]).unwrap_err();
    assert_eq!(e.to_string(), "missing [buses]");
}

#[test]
fn unknown_keys_are_rejected() {
    let text = std::fs::read_to_string(scenario_path("fivebus_table2")).unwrap();
    let typo = text.replace("[controller]\n", "[controller]\nalpah = 2.0\n");
    let e = parse_scenario_str(&typo, &[]).unwrap_err();
    assert!(matches!(e, ConfigError::Syntax(_)));
    assert!(e.to_string().contains("alpah"), "{e}");
    let e = parse_scenario_str(&text, &["delays.uniformm=0.1".into()]).unwrap_err();
    assert!(e.to_string().contains("uniformm"), "{e}");
}

#[test]
fn syntax_errors_report_the_line() {
    let e = parse_scenario_str("[[buses]]\nlabel = \"1\"\ndamping = = 1\n[controller]\nkind = \"scatter\"\n", &[])
        .unwrap_err();
    assert!(e.to_string().contains("line 3"), "{e}");
}

#[test]
fn semantic_errors_are_reported() {
    let text = std::fs::read_to_string(scenario_path("fivebus_table2")).unwrap();
    let cases: [(&str, &str, &str); 6] = [
        ("to = \"5\"\nsusceptance = 1.5", "to = \"9\"\nsusceptance = 1.5", "unknown bus \"9\""),
        ("kind = \"scatter\"", "kind = \"scater\"", "not one of"),
        ("label = \"2\"", "label = \"1\"", "duplicate bus label"),
        ("damping = 0.8", "damping = -0.8", "damping must be positive"),
        ("[sim]\n", "[delays]\ninterval = [0.1, 1.0]\n\n[sim]\n", "need delays.seed"),
        ("[sim]\n", "[disturbance]\nkind = \"gaussian\"\npower = 0.01\n\n[sim]\n", "needs disturbance.seed"),
    ];
    for (from, to, needle) in cases {
        assert!(text.contains(from), "{from}");
        let e = parse_scenario_str(&text.replacen(from, to, 1), &[]).unwrap_err();
        assert!(e.to_string().contains(needle), "{needle}: {e}");
    }
}

#[test]
fn overrides_address_nested_keys() {
    let s = load("fivebus_scatter_delay", &["sim.t_end=12.5", "buses.3.demand=0.45", "controller.kind=\"reform\""]);
    assert_eq!(s.sim.t_end, 12.5);
    assert_eq!(s.buses[3].demand, 0.45);
    assert_eq!(s.controller.kind, "reform");
    // choosing another delay kind drops the interval and its seed
    let s = load("fivebus_scatter_delay", &["delays.uniform=0.03"]);
    assert_eq!(s.delays.uniform, Some(0.03));
    assert_eq!((s.delays.interval, s.delays.seed), (None, None));

    let mut doc = toml::Table::new();
    for bad in ["no_equals", "a..b=1"] {
        assert!(matches!(apply_override(&mut doc, bad), Err(ConfigError::Override(..))), "{bad}");
    }
    let mut doc: toml::Table = "buses = [1, 2]\nx = 3".parse().unwrap();
    assert!(apply_override(&mut doc, "buses.7.demand=1").is_err());
    assert!(apply_override(&mut doc, "x.y=1").is_err());
}

#[test]
fn interval_draws_are_reproducible_and_follow_the_seed() {
    let draws = |s: &Scenario| {
        let spec = s.to_run_spec().unwrap();
        resolve_delays(&spec.delays, &Topology::new(&spec.model).unwrap()).unwrap()
    };
    let a = load("fivebus_scatter_delay", &[]);
    let b = load("fivebus_scatter_delay", &[]);
    assert_eq!(draws(&a), draws(&b));
    let mut c = a.clone();
    assert!(c.reseed(7));
    assert_eq!(c.delays.interval, a.delays.interval);
    assert_eq!(c.sim, a.sim);
    assert_ne!(draws(&c), draws(&a));
    assert!(matches!(a.to_run_spec().unwrap().delays, DelaySpec::Interval { seed: 1, .. }));
    assert!(!load("fivebus_table2", &[]).reseed(7));
    // TOML integers are signed 64-bit
    let mut d = a.clone();
    d.reseed(u64::MAX);
    assert!(d.to_run_spec().unwrap_err().to_string().contains("seed"));
}

fn csv_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn oracle_rows() {
    let rows = csv_rows(&oracle_csv(&load("fivebus_table2", &[])).unwrap());
    assert_eq!(rows.len(), 3);
    let price: f64 = rows[0][2].parse().unwrap();
    assert!((price - 0.9367347).abs() < 1e-7, "{price}");
    let pm: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for (got, want) in pm.iter().zip([0.6903061, 0.3341837, 0.4755102]) {
        assert!((got - want).abs() < 1e-7);
    }

    let rows = csv_rows(&oracle_csv(&load("fivebus_bounds", &[])).unwrap());
    let pm: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for (got, want) in pm.iter().zip([0.6, 0.3756757, 0.5243243]) {
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }
    assert!(rows[0][4].parse::<f64>().unwrap() > 0.0);

    let infeasible = load("fivebus_bounds", &["buses.1.generator.pm_max=0.1", "buses.2.generator.pm_max=0.1"]);
    assert!(oracle_csv(&infeasible).unwrap_err().contains("bounds admit"), "infeasible bounds must be reported");
}

#[test]
fn verdicts_and_exit_codes() {
    let short = ["sim.t_end=10"];
    let s = load("fivebus_table2", &short);
    let v = evaluate("x", &s, &execute(&s, false));
    assert!(!v.pass && v.exit_code == EXIT_THRESHOLD && v.line.starts_with("FAIL x:"), "{v:?}");

    let mut diverging = load("fivebus_reform_delay", &["sim.t_end=300"]);
    let result = execute(&diverging, false);
    assert!(result.is_err());
    assert!(evaluate("r", &diverging, &result).pass);
    diverging.expect.outcome = Outcome::Restore;
    assert_eq!(evaluate("r", &diverging, &result).exit_code, EXIT_INTEGRATION);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freqsync"))
}

#[test]
fn binary_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let table2 = scenario_path("fivebus_table2");
    let status = |args: &[&str]| bin().args(args).output().unwrap();

    let ok = status(&["run", table2.to_str().unwrap(), "--out", out, "--set", "sim.t_end=100", "--diagnostics"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("PASS fivebus_table2:"));
    let header = std::fs::read_to_string(dir.path().join("fivebus_table2.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("V_B,V_S,V_all"));
    let metrics: toml::Table =
        std::fs::read_to_string(dir.path().join("fivebus_table2.metrics.toml")).unwrap().parse().unwrap();
    assert_eq!(metrics["verdict"].as_str(), Some("PASS"));
    assert!(metrics["metrics"]["terminal_omega"].as_float().unwrap() < 1e-3);

    let short = status(&["run", table2.to_str().unwrap(), "--out", out, "--set", "sim.t_end=8"]);
    assert_eq!(short.status.code(), Some(4));

    let bad = status(&["validate", table2.to_str().unwrap(), "--set", "controller.kind=\"nope\""]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = status(&["validate", "/nonexistent.toml"]);
    assert_eq!(missing.status.code(), Some(2));

    let diverge = status(&[
        "run",
        table2.to_str().unwrap(),
        "--out",
        out,
        "--set",
        "controller.kind=\"reform\"",
        "--set",
        "delays.uniform=0.2",
        "--set",
        "sim.t_end=100",
    ]);
    assert_eq!(diverge.status.code(), Some(3));

    let oracle = status(&["oracle", scenario_path("fivebus_bounds").to_str().unwrap()]);
    assert_eq!(oracle.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&oracle.stdout).starts_with("bus,pm,price,lambda_bar,mu_bar\n1,0.6000000000,"));
    let infeasible = status(&[
        "oracle",
        scenario_path("fivebus_bounds").to_str().unwrap(),
        "--set",
        "buses.0.generator.pm_max=0.01",
        "--set",
        "buses.1.generator.pm_max=0.01",
        "--set",
        "buses.2.generator.pm_max=0.01",
    ]);
    assert_eq!(infeasible.status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = bin()
            .args(["run", scenario_path("fivebus_disturbance_awgn").to_str().unwrap(), "--seed", "3"])
            .args(["--set", "sim.t_end=20", "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.code().is_some());
        csv.push(std::fs::read(out.join("fivebus_disturbance_awgn.csv")).unwrap());
    }
    assert!(!csv[0].is_empty());
    assert_eq!(csv[0], csv[1]);
}

#[test]
fn sweep_keeps_value_order_and_matches_single_runs() {
    let path = scenario_path("fivebus_reform_delay");
    let opts = LoadOptions { seed: None, overrides: vec!["expect.omega_tol=1e-3".into()] };
    let values: Vec<String> = ["0", "0.01", "0.03"].map(String::from).to_vec();
    let rows = sweep(&path, &opts, "delays.uniform", &values).unwrap();
    assert_eq!(rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["0", "0.01", "0.03"]);
    // restoration degrades as the delay grows
    let omega = |i: usize| rows[i].metrics.as_ref().map_or(f64::INFINITY, |m| m.terminal_omega);
    assert!(omega(0) < 1e-3, "{}", omega(0));
    assert!(omega(0) < omega(1) && omega(1) < omega(2), "{} {} {}", omega(0), omega(1), omega(2));

    let single = sweep(&path, &opts, "delays.uniform", &["0".to_string()]).unwrap();
    let direct = execute(&load("fivebus_reform_delay", &["expect.omega_tol=1e-3", "delays.uniform=0"]), false).unwrap();
    assert_eq!(single[0].metrics.as_ref(), Some(&direct.metrics));

    assert!(sweep(&path, &opts, "sim.no_such_key", &values).is_err());
}

#[test]
fn seed_sweep_of_wave_controller_restores_every_time() {
    let values: Vec<String> = (1..=5).map(|s| s.to_string()).collect();
    let rows = sweep(&scenario_path("fivebus_scatter_delay"), &LoadOptions::default(), "seed", &values).unwrap();
    for r in &rows {
        assert!(r.verdict.pass, "{}", r.verdict.line);
    }
}

fn finite() -> impl Strategy<Value = f64> {
    0.01f64..10.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edited_scenarios_round_trip(
        damping in finite(),
        demand in 0.0f64..2.0,
        t_end in finite(),
        tol in 1e-6f64..1.0,
        kind in 0usize..6,
        delay in prop_oneof![Just(None), (0.0f64..1.0).prop_map(Some)],
        seed in 0..=i64::MAX as u64,
    ) {
        let mut s = load("fivebus_table2", &[]);
        s.buses[4].damping = damping;
        s.buses[0].demand = demand;
        s.sim.t_end = t_end;
        s.expect.pm_tol = Some(tol);
        s.controller.kind = freqsync::ControllerKind::ALL[kind].name().to_string();
        match delay {
            Some(d) => s.delays.uniform = Some(d),
            None => {
                s.delays.interval = Some([0.1, 1.0]);
                s.delays.seed = Some(seed);
            }
        }
        let text = serialize_scenario(&s);
        let back = parse_scenario_str(&text, &[]).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(serialize_scenario(&back), text);
    }
}
