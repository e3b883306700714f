//! Scenario files: a TOML document describing the network, the controller,
//! delays, disturbances, integration settings and pass thresholds.
//!
//! Unknown keys anywhere are rejected.

use std::collections::HashMap;
use std::path::Path;

use freqsync::channel::{DelaySpec, DisturbanceSpec, Interpolation};
use freqsync::controller::{ControllerConfig, ControllerKind};
use freqsync::dde::{InitialState, LoadEvent, LoadProfile, Method, Prehistory, RunSpec, SimConfig};
use freqsync::network::{validate, Area, BusParams, GeneratorParams, Line, NetworkModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("missing [{0}]")]
    Missing(&'static str),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub buses: Vec<BusEntry>,
    #[serde(default)]
    pub phys_lines: Vec<PhysLineEntry>,
    #[serde(default)]
    pub comm_lines: Vec<CommLineEntry>,
    #[serde(default)]
    pub areas: Vec<AreaEntry>,
    pub controller: ControllerSection,
    #[serde(default)]
    pub delays: DelaySection,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub events: EventsSection,
    #[serde(default)]
    pub expect: ExpectSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    pub label: String,
    pub damping: f64,
    #[serde(default)]
    pub demand: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorEntry>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEntry {
    pub inertia: f64,
    pub tau: f64,
    /// Quadratic cost `cost_q / 2 (p - cost_c)^2`.
    pub cost_q: f64,
    #[serde(default)]
    pub cost_c: f64,
    #[serde(default = "one")]
    pub k_g: f64,
    #[serde(default = "one")]
    pub k_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pm_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pm_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysLineEntry {
    pub from: String,
    pub to: String,
    pub susceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommLineEntry {
    pub from: String,
    pub to: String,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaEntry {
    pub buses: Vec<String>,
    /// The one bus that knows the schedule.
    pub informed: String,
    /// Scheduled net import.
    pub schedule: f64,
}

fn default_tau_obs() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: String,
    #[serde(default)]
    pub bounds: bool,
    #[serde(default)]
    pub observer: bool,
    #[serde(default = "default_tau_obs")]
    pub observer_tau: f64,
    #[serde(default = "one")]
    pub multiplier_init: f64,
}

/// Exactly one of `uniform`, `interval` (with `seed`) or `explicit`; none
/// means no delay.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<Vec<ExplicitDelay>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitDelay {
    pub from: String,
    pub to: String,
    pub delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    #[default]
    None,
    Decaying,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    #[serde(default)]
    pub kind: DisturbanceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationName {
    #[default]
    Linear,
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrehistoryName {
    #[default]
    Zero,
    Steady,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub h: f64,
    pub t_end: f64,
    pub method: MethodName,
    pub record_every: usize,
    pub interpolation: InterpolationName,
    pub prehistory: PrehistoryName,
    pub settle_threshold: f64,
    pub divergence_limit: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            h: d.h,
            t_end: d.t_end,
            method: MethodName::Rk4,
            record_every: d.record_every,
            interpolation: InterpolationName::Linear,
            prehistory: PrehistoryName::Zero,
            settle_threshold: d.settle_threshold,
            divergence_limit: d.divergence_limit,
        }
    }
}

/// Bus demands apply from `load_step_at` (zero before it), or from the start
/// when it is absent. `changes` replace the whole demand vector later on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_step_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub changes: Vec<DemandChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandChange {
    pub t: f64,
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Frequency and dispatch must be restored within the tolerances.
    #[default]
    Restore,
    /// The run must diverge or end with `|omega| >= omega_tol`.
    Fail,
}

fn default_omega_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectSection {
    #[serde(default)]
    pub outcome: Outcome,
    #[serde(default = "default_omega_tol")]
    pub omega_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pm_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_flow_tol: Option<f64>,
}

impl Default for ExpectSection {
    fn default() -> Self {
        Self { outcome: Outcome::Restore, omega_tol: default_omega_tol(), pm_tol: None, area_flow_tol: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory for the trajectory CSV and metrics file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default)]
    pub diagnostics: bool,
}

/// Reads and validates a scenario file, applying `key=value` overrides first.
pub fn parse_scenario(path: &Path, overrides: &[String]) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_scenario_str(&text, overrides)
}

pub fn parse_scenario_str(text: &str, overrides: &[String]) -> Result<Scenario, ConfigError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    for section in ["buses", "controller"] {
        if !doc.contains_key(section) {
            return Err(ConfigError::Missing(section));
        }
    }
    let scenario: Scenario = if overrides.is_empty() {
        // straight from the text so that errors carry line numbers
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?
    } else {
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Scenario::deserialize(toml::Value::Table(doc)).map_err(|e| ConfigError::Syntax(e.to_string()))?
    };
    scenario.to_run_spec()?;
    Ok(scenario)
}

pub fn serialize_scenario(s: &Scenario) -> String {
    toml::to_string(s).expect("scenario types always serialize")
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

const DELAY_KINDS: [&str; 3] = ["uniform", "interval", "explicit"];

/// Sets a dotted path such as `sim.t_end=50` or `buses.0.demand=0.2`.
/// Choosing one delay kind drops the others so a sweep over
/// `delays.uniform` works on any scenario.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let bad = |why: &str| ConfigError::Override(assignment.to_string(), why.to_string());
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty path segment"));
    }
    let value = parse_value(raw.trim());
    if parts.len() == 2 && parts[0] == "delays" && DELAY_KINDS.contains(&parts[1]) {
        if let Some(toml::Value::Table(d)) = doc.get_mut("delays") {
            d.retain(|k, _| k == parts[1] || (k == "seed" && parts[1] == "interval"));
        }
    }
    let mut cur = doc
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for (i, part) in parts.iter().enumerate().skip(1) {
        cur = match cur {
            toml::Value::Table(t) => {
                t.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| bad("array segment must be an index"))?;
                let n = a.len();
                a.get_mut(idx).ok_or_else(|| bad(&format!("index {idx} out of range ({n} entries)")))?
            }
            _ => return Err(bad(&format!("`{}` is not a table", parts[..i].join(".")))),
        };
    }
    *cur = value;
    Ok(())
}

fn resolve(labels: &HashMap<&str, usize>, label: &str, ctx: &str) -> Result<usize, ConfigError> {
    labels.get(label).copied().ok_or_else(|| invalid(format!("{ctx}: unknown bus \"{label}\"")))
}

/// Seeds must survive a round trip through TOML's signed integers.
fn check_seed(seed: u64) -> Result<u64, ConfigError> {
    if seed > i64::MAX as u64 {
        return Err(invalid(format!("seed {seed} exceeds {}", i64::MAX)));
    }
    Ok(seed)
}

fn positive_finite(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl Scenario {
    pub fn model(&self) -> Result<NetworkModel, ConfigError> {
        let mut labels = HashMap::new();
        for (j, b) in self.buses.iter().enumerate() {
            if labels.insert(b.label.as_str(), j).is_some() {
                return Err(invalid(format!("duplicate bus label \"{}\"", b.label)));
            }
        }
        let buses = self
            .buses
            .iter()
            .map(|b| BusParams {
                label: b.label.clone(),
                damping: b.damping,
                demand: b.demand,
                generator: b.generator.as_ref().map(|g| GeneratorParams {
                    k_g: g.k_g,
                    k_c: g.k_c,
                    pm_min: g.pm_min,
                    pm_max: g.pm_max,
                    ..GeneratorParams::quadratic(g.inertia, g.tau, g.cost_q, g.cost_c)
                }),
            })
            .collect();
        let mut phys_lines = Vec::new();
        for (i, l) in self.phys_lines.iter().enumerate() {
            let ctx = format!("phys_lines[{i}]");
            phys_lines.push(Line::new(resolve(&labels, &l.from, &ctx)?, resolve(&labels, &l.to, &ctx)?, l.susceptance));
        }
        let mut comm_lines = Vec::new();
        for (i, l) in self.comm_lines.iter().enumerate() {
            let ctx = format!("comm_lines[{i}]");
            comm_lines.push(Line::new(resolve(&labels, &l.from, &ctx)?, resolve(&labels, &l.to, &ctx)?, l.weight));
        }
        let mut areas = Vec::new();
        for (i, a) in self.areas.iter().enumerate() {
            let ctx = format!("areas[{i}]");
            let buses = a.buses.iter().map(|b| resolve(&labels, b, &ctx)).collect::<Result<_, _>>()?;
            areas.push(Area { buses, informed_bus: resolve(&labels, &a.informed, &ctx)?, schedule: a.schedule });
        }
        let model = NetworkModel { buses, phys_lines, comm_lines, areas };
        let violations = validate(&model);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(invalid(format!("invalid network: {}", msgs.join("; "))));
        }
        Ok(model)
    }

    pub fn controller_config(&self) -> Result<ControllerConfig, ConfigError> {
        let c = &self.controller;
        let kind = ControllerKind::from_name(&c.kind).ok_or_else(|| {
            let names: Vec<&str> = ControllerKind::ALL.iter().map(|k| k.name()).collect();
            invalid(format!("controller.kind \"{}\" is not one of {}", c.kind, names.join(", ")))
        })?;
        if !positive_finite(c.observer_tau) {
            return Err(invalid("controller.observer_tau must be positive"));
        }
        if !positive_finite(c.multiplier_init) {
            return Err(invalid("controller.multiplier_init must be positive"));
        }
        Ok(ControllerConfig {
            kind,
            bounds: c.bounds,
            observer: c.observer,
            observer_tau: c.observer_tau,
            multiplier_init: c.multiplier_init,
        })
    }

    pub fn delay_spec(&self) -> Result<DelaySpec, ConfigError> {
        let d = &self.delays;
        let set = [d.uniform.is_some(), d.interval.is_some(), d.explicit.is_some()];
        if set.iter().filter(|&&s| s).count() > 1 {
            return Err(invalid("[delays] takes only one of uniform, interval, explicit"));
        }
        if d.seed.is_some() && d.interval.is_none() {
            return Err(invalid("delays.seed only applies to interval delays"));
        }
        if let Some(t) = d.uniform {
            return Ok(DelaySpec::Uniform(t));
        }
        if let Some([lo, hi]) = d.interval {
            let seed = check_seed(d.seed.ok_or_else(|| invalid("interval delays need delays.seed"))?)?;
            return Ok(DelaySpec::Interval { lo, hi, seed });
        }
        if let Some(list) = &d.explicit {
            let labels: HashMap<&str, usize> =
                self.buses.iter().enumerate().map(|(j, b)| (b.label.as_str(), j)).collect();
            let mut out = Vec::new();
            for (i, e) in list.iter().enumerate() {
                let ctx = format!("delays.explicit[{i}]");
                out.push((resolve(&labels, &e.from, &ctx)?, resolve(&labels, &e.to, &ctx)?, e.delay));
            }
            return Ok(DelaySpec::Explicit(out));
        }
        Ok(DelaySpec::Uniform(0.0))
    }

    pub fn disturbance_spec(&self) -> Result<DisturbanceSpec, ConfigError> {
        let d = &self.disturbance;
        let seed = || check_seed(d.seed.ok_or_else(|| invalid("a random disturbance needs disturbance.seed"))?);
        match d.kind {
            DisturbanceKind::None => {
                if d.power.is_some() || d.seed.is_some() {
                    return Err(invalid("disturbance.power and seed need a disturbance kind"));
                }
                Ok(DisturbanceSpec::None)
            }
            DisturbanceKind::Decaying => {
                if d.power.is_some() {
                    return Err(invalid("disturbance.power only applies to gaussian"));
                }
                Ok(DisturbanceSpec::Decaying { seed: seed()? })
            }
            DisturbanceKind::Gaussian => {
                let power = d.power.ok_or_else(|| invalid("gaussian disturbance needs disturbance.power"))?;
                Ok(DisturbanceSpec::Gaussian { power, seed: seed()? })
            }
        }
    }

    pub fn load_profile(&self, model: &NetworkModel) -> Result<LoadProfile, ConfigError> {
        let demand = model.demand();
        let mut profile = match self.events.load_step_at {
            Some(t) if !(t >= 0.0 && t.is_finite()) => return Err(invalid("events.load_step_at must be >= 0")),
            Some(t) => LoadProfile::step(t, demand),
            None => LoadProfile::constant(demand),
        };
        let mut last = profile.last_event();
        for (i, c) in self.events.changes.iter().enumerate() {
            if c.demand.len() != model.n_buses() {
                return Err(invalid(format!("events.changes[{i}] needs {} demands", model.n_buses())));
            }
            if !(c.t > last) {
                return Err(invalid(format!("events.changes[{i}] must come after t = {last}")));
            }
            last = c.t;
            profile.events.push(LoadEvent { t: c.t, demand: c.demand.clone() });
        }
        Ok(profile)
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let s = &self.sim;
        if !positive_finite(s.h) || !positive_finite(s.t_end) {
            return Err(invalid("sim.h and sim.t_end must be positive"));
        }
        if s.record_every == 0 {
            return Err(invalid("sim.record_every must be at least 1"));
        }
        if !positive_finite(s.settle_threshold) || !positive_finite(s.divergence_limit) {
            return Err(invalid("sim.settle_threshold and sim.divergence_limit must be positive"));
        }
        Ok(SimConfig {
            h: s.h,
            t_end: s.t_end,
            method: match s.method {
                MethodName::Rk4 => Method::Rk4,
                MethodName::Euler => Method::Euler,
            },
            record_every: s.record_every,
            interpolation: match s.interpolation {
                InterpolationName::Linear => Interpolation::Linear,
                InterpolationName::Cubic => Interpolation::Cubic,
            },
            prehistory: match s.prehistory {
                PrehistoryName::Zero => Prehistory::Zero,
                PrehistoryName::Steady => Prehistory::Steady,
            },
            settle_threshold: s.settle_threshold,
            divergence_limit: s.divergence_limit,
        })
    }

    /// Everything the integrator needs; also the full semantic check.
    pub fn to_run_spec(&self) -> Result<RunSpec, ConfigError> {
        let model = self.model()?;
        let controller = self.controller_config()?;
        let e = &self.expect;
        if !positive_finite(e.omega_tol)
            || e.pm_tol.is_some_and(|v| !positive_finite(v))
            || e.area_flow_tol.is_some_and(|v| !positive_finite(v))
        {
            return Err(invalid("[expect] tolerances must be positive"));
        }
        Ok(RunSpec {
            delays: self.delay_spec()?,
            disturbance: self.disturbance_spec()?,
            load: self.load_profile(&model)?,
            sim: self.sim_config()?,
            initial: InitialState::Flat,
            diagnostics: None,
            model,
            controller,
        })
    }

    /// Reseeds every random element; returns false when there is none.
    pub fn reseed(&mut self, seed: u64) -> bool {
        let mut any = false;
        if self.delays.interval.is_some() {
            self.delays.seed = Some(seed);
            any = true;
        }
        if self.disturbance.kind != DisturbanceKind::None {
            self.disturbance.seed = Some(seed);
            any = true;
        }
        any
    }
}
