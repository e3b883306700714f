use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use freqsync::dde::{self, oracle_for, DiagnosticsSummary, Metrics, SimError, Trajectory};
use freqsync::lyapunov::run_diagnosed;
use freqsync::opt::kkt_residual;
use rayon::prelude::*;
use serde::Serialize;

use crate::scenario::{apply_override, parse_scenario, ConfigError, Outcome, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INTEGRATION: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

/// Whether a simulation error comes from the setup rather than the dynamics.
pub fn is_setup_error(e: &SimError) -> bool {
    !matches!(e, SimError::Diverged { .. } | SimError::NonFinite { .. } | SimError::MultiplierCollapse { .. })
}

/// Integrates a scenario, with storage diagnostics when asked.
pub fn execute(s: &Scenario, diagnostics: bool) -> Result<Trajectory, SimError> {
    let spec = s.to_run_spec().map_err(|e| SimError::Config(e.to_string()))?;
    if diagnostics {
        run_diagnosed(&spec).map(|(t, _)| t)
    } else {
        dde::run(&spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub exit_code: i32,
    /// `PASS name: ...` or `FAIL name: ...`.
    pub line: String,
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

/// Checks a run against the scenario's `[expect]` section.
pub fn evaluate(name: &str, s: &Scenario, result: &Result<Trajectory, SimError>) -> Verdict {
    let e = &s.expect;
    let verdict = |pass: bool, code: i32, detail: String| Verdict {
        pass,
        exit_code: if pass { EXIT_OK } else { code },
        line: format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" }),
    };
    let tr = match result {
        Err(err) if is_setup_error(err) => return verdict(false, EXIT_CONFIG, err.to_string()),
        Err(err) => {
            return match e.outcome {
                Outcome::Fail => verdict(true, EXIT_OK, format!("diverged as expected ({err})")),
                Outcome::Restore => verdict(false, EXIT_INTEGRATION, err.to_string()),
            }
        }
        Ok(tr) => tr,
    };
    let m = &tr.metrics;
    let omega = m.terminal_omega;
    if e.outcome == Outcome::Fail {
        let pass = !(omega < e.omega_tol);
        let rel = if pass { ">=" } else { "<" };
        return verdict(pass, EXIT_THRESHOLD, format!("terminal |omega| {} {rel} {} (expected no restoration)", sci(omega), sci(e.omega_tol)));
    }
    let mut parts = Vec::new();
    let mut pass = true;
    let mut check = |label: &str, value: Option<f64>, tol: f64| {
        match value {
            Some(v) if v < tol => parts.push(format!("{label} {} < {}", sci(v), sci(tol))),
            Some(v) => {
                pass = false;
                parts.push(format!("{label} {} >= {}", sci(v), sci(tol)));
            }
            None => {
                pass = false;
                parts.push(format!("{label} unavailable"));
            }
        }
    };
    check("terminal |omega|", Some(omega), e.omega_tol);
    if let Some(tol) = e.pm_tol {
        check("pM error", m.terminal_pm_error, tol);
    }
    if let Some(tol) = e.area_flow_tol {
        check("area flow error", m.terminal_area_flow_error, tol);
    }
    if let Some(min) = m.min_multiplier {
        if min > 0.0 {
            parts.push(format!("multipliers > 0 (min {})", sci(min)));
        } else {
            pass = false;
            parts.push(format!("multiplier reached {}", sci(min)));
        }
    }
    verdict(pass, EXIT_THRESHOLD, parts.join(", "))
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    scenario: &'a str,
    verdict: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricsBody>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<DiagnosticsBody>,
}

#[derive(Debug, Serialize)]
struct MetricsBody {
    #[serde(skip_serializing_if = "Option::is_none")]
    settling_time: Option<f64>,
    terminal_omega: f64,
    terminal_pm: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_pm: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal_pm_error: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    terminal_area_flows: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal_area_flow_error: Option<f64>,
    angle_violation: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_multiplier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_decode_deviation: Option<f64>,
}

impl From<&Metrics> for MetricsBody {
    fn from(m: &Metrics) -> Self {
        Self {
            settling_time: m.settling_time,
            terminal_omega: m.terminal_omega,
            terminal_pm: m.terminal_pm.clone(),
            oracle_pm: m.oracle_pm.clone(),
            terminal_pm_error: m.terminal_pm_error,
            terminal_area_flows: m.terminal_area_flows.clone(),
            terminal_area_flow_error: m.terminal_area_flow_error,
            angle_violation: m.angle_violation,
            min_multiplier: m.min_multiplier,
            max_decode_deviation: m.max_decode_deviation,
        }
    }
}

#[derive(Debug, Serialize)]
struct DiagnosticsBody {
    v_reference: f64,
    v_final: f64,
    max_increment: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    controller_passivity_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channel_passivity_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_channel_storage: Option<f64>,
}

impl From<&DiagnosticsSummary> for DiagnosticsBody {
    fn from(d: &DiagnosticsSummary) -> Self {
        Self {
            v_reference: d.v_reference,
            v_final: d.v_final,
            max_increment: d.max_increment,
            controller_passivity_gap: d.controller_passivity_gap,
            channel_passivity_gap: d.channel_passivity_gap,
            min_channel_storage: d.min_channel_storage,
        }
    }
}

/// Options shared by the commands that load a scenario.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

pub fn load(path: &Path, opts: &LoadOptions) -> Result<Scenario, ConfigError> {
    let mut s = parse_scenario(path, &opts.overrides)?;
    if let Some(seed) = opts.seed {
        if !s.reseed(seed) {
            eprintln!("note: --seed has no effect, {} has no random element", path.display());
        }
        s.to_run_spec()?;
    }
    Ok(s)
}

fn scenario_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn report_config(e: &ConfigError) -> i32 {
    eprintln!("error: {e}");
    EXIT_CONFIG
}

/// `run`: integrates, writes `<name>.csv` and `<name>.metrics.toml`, prints the verdict.
pub fn cmd_run(path: &Path, opts: &LoadOptions, out: Option<&Path>, diagnostics: bool) -> i32 {
    let s = match load(path, opts) {
        Ok(s) => s,
        Err(e) => return report_config(&e),
    };
    let name = scenario_name(path);
    let dir = out.map(Path::to_path_buf).or_else(|| s.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| "out".into());
    let result = execute(&s, diagnostics || s.output.diagnostics);
    let verdict = evaluate(&name, &s, &result);
    if let Err(e) = write_outputs(&dir, &name, &result, &verdict) {
        eprintln!("error: writing results to {}: {e}", dir.display());
        return EXIT_CONFIG;
    }
    println!("{}", verdict.line);
    verdict.exit_code
}

fn write_outputs(
    dir: &Path,
    name: &str,
    result: &Result<Trajectory, SimError>,
    verdict: &Verdict,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let file = MetricsFile {
        scenario: name,
        verdict: if verdict.pass { "PASS" } else { "FAIL" },
        error: result.as_ref().err().map(|e| e.to_string()),
        metrics: result.as_ref().ok().map(|t| MetricsBody::from(&t.metrics)),
        diagnostics: result.as_ref().ok().and_then(|t| t.diagnostics.as_ref()).map(DiagnosticsBody::from),
    };
    let text = toml::to_string(&file).map_err(std::io::Error::other)?;
    fs::write(dir.join(format!("{name}.metrics.toml")), text)?;
    if let Ok(tr) = result {
        let f = fs::File::create(dir.join(format!("{name}.csv")))?;
        let mut w = std::io::BufWriter::new(f);
        tr.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Dispatch oracle for the final demand as CSV, one row per generator.
pub fn oracle_csv(s: &Scenario) -> Result<String, String> {
    let spec = s.to_run_spec().map_err(|e| e.to_string())?;
    let model = spec.model.with_demand(spec.load.final_demand());
    let sol = oracle_for(&model, &spec.controller).map_err(|e| e.to_string())?;
    let mut out = String::from("bus,pm,price,lambda_bar,mu_bar\n");
    for (g, &j) in sol.generators.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.10},{:.10},{:.10},{:.10}\n",
            model.buses[j].label,
            sol.pm[g],
            sol.price(g),
            sol.lambda_bar[g],
            sol.mu_bar[g]
        ));
    }
    let kkt = kkt_residual(&model, &sol);
    if kkt >= 1e-10 {
        eprintln!("warning: KKT residual {kkt:.3e}");
    }
    Ok(out)
}

/// `oracle`: infeasible dispatch problems are reported as configuration errors.
pub fn cmd_oracle(path: &Path, opts: &LoadOptions, out: Option<&Path>) -> i32 {
    let s = match load(path, opts) {
        Ok(s) => s,
        Err(e) => return report_config(&e),
    };
    match oracle_csv(&s) {
        Ok(csv) => emit(out, &csv),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> i32 {
    match out {
        None => {
            print!("{text}");
            EXIT_OK
        }
        Some(p) => match fs::write(p, text) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: writing {}: {e}", p.display());
                EXIT_CONFIG
            }
        },
    }
}

/// One sweep row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub verdict: Verdict,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Runs the scenario once per value of `param` (a dotted key, or `seed`),
/// in parallel; rows come back in the order of `values`.
pub fn sweep(path: &Path, opts: &LoadOptions, param: &str, values: &[String]) -> Result<Vec<SweepRow>, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let name = scenario_name(path);
    let scenarios: Vec<Scenario> = values
        .iter()
        .map(|v| {
            let mut o = opts.clone();
            if param == "seed" {
                o.seed = Some(v.parse().map_err(|_| ConfigError::Override(format!("seed={v}"), "not an integer".into()))?);
            } else {
                // reject unaddressable parameters before spending time on runs
                let mut probe = text.parse::<toml::Table>().map_err(|e| ConfigError::Syntax(e.to_string()))?;
                apply_override(&mut probe, &format!("{param}={v}"))?;
                o.overrides.push(format!("{param}={v}"));
            }
            let mut s = crate::scenario::parse_scenario_str(&text, &o.overrides)?;
            if let Some(seed) = o.seed {
                s.reseed(seed);
            }
            Ok(s)
        })
        .collect::<Result<_, ConfigError>>()?;
    Ok(scenarios
        .par_iter()
        .zip(values.par_iter())
        .map(|(s, v)| {
            let result = execute(s, false);
            let verdict = evaluate(&format!("{name}[{param}={v}]"), s, &result);
            let (metrics, error) = match result {
                Ok(t) => (Some(t.metrics), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRow { value: v.clone(), verdict, metrics, error }
        })
        .collect())
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6e}"))
}

pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{param},verdict,settling_time,terminal_omega,pm_error,area_flow_error,error\n");
    for r in rows {
        let m = r.metrics.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.value,
            if r.verdict.pass { "PASS" } else { "FAIL" },
            opt_field(m.and_then(|m| m.settling_time)),
            opt_field(m.map(|m| m.terminal_omega)),
            opt_field(m.and_then(|m| m.terminal_pm_error)),
            opt_field(m.and_then(|m| m.terminal_area_flow_error)),
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    out
}

/// `sweep`: exits non-zero only for configuration problems; verdicts are in the table.
pub fn cmd_sweep(path: &Path, opts: &LoadOptions, param: &str, values: &[String], out: Option<&Path>) -> i32 {
    match sweep(path, opts, param, values) {
        Ok(rows) => emit(out, &sweep_table(param, &rows)),
        Err(e) => report_config(&e),
    }
}

pub fn cmd_validate(path: &Path, opts: &LoadOptions) -> i32 {
    match load(path, opts) {
        Ok(s) => {
            let n_gen = s.buses.iter().filter(|b| b.generator.is_some()).count();
            println!(
                "ok: {} buses ({n_gen} generators), {} lines, {} links, {} areas, controller {}",
                s.buses.len(),
                s.phys_lines.len(),
                s.comm_lines.len(),
                s.areas.len(),
                s.controller.kind
            );
            EXIT_OK
        }
        Err(e) => report_config(&e),
    }
}
