//! Fixed-step integration of the closed loop: plant, controller, channels and
//! the optional bound multipliers and demand observer.
//!
//! Histories live on the step grid `t_k = k h`. Delays are either zero or at
//! least one step, so every delayed lookup inside a step reads data recorded
//! before the step started.

use std::f64::consts::FRAC_PI_2;
use std::io::{self, Write};
use std::ops::Range;

use thiserror::Error;

use crate::channel::{
    self, ChannelError, DelaySpec, Disturbance, DisturbanceSpec, Exchange, History, Interpolation, LinkDelays,
    ScatterLink,
};
use crate::controller::{self, ControllerConfig, ControllerKind, Received};
use crate::lyapunov::{self, Equilibrium};
use crate::network::{validate, End, GeneratorParams, NetworkError, NetworkModel, Topology, Violation};
use crate::opt::{self, OptError};
use crate::plant::{generation_input, generation_input_bounded};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid network: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Oracle(#[from] OptError),
    #[error("bad simulation setting: {0}")]
    Config(String),
    #[error("delay {delay} is positive but shorter than the step {h}")]
    DelayBelowStep { delay: f64, h: f64 },
    #[error("{variable} became {value} at t = {t}")]
    NonFinite { variable: String, t: f64, value: f64 },
    #[error("{variable} reached {value:.3e} at t = {t}, beyond the divergence limit")]
    Diverged { variable: String, t: f64, value: f64 },
    #[error("multiplier step rejection did not converge at t = {t}")]
    MultiplierCollapse { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Rk4,
    Euler,
}

/// What channel frames look like before `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Prehistory {
    /// Nothing was sent.
    #[default]
    Zero,
    /// Frames a zero-delay exchange would produce at the initial state.
    Steady,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub h: f64,
    pub t_end: f64,
    pub method: Method,
    /// Keep every n-th step in the trajectory.
    pub record_every: usize,
    pub interpolation: Interpolation,
    pub prehistory: Prehistory,
    /// Frequency bound for the settling time.
    pub settle_threshold: f64,
    /// Any state beyond this magnitude aborts the run.
    pub divergence_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            t_end: 200.0,
            method: Method::Rk4,
            record_every: 100,
            interpolation: Interpolation::Linear,
            prehistory: Prehistory::Zero,
            settle_threshold: 1e-3,
            divergence_limit: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadEvent {
    pub t: f64,
    pub demand: Vec<f64>,
}

/// Piecewise-constant demand.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub initial: Vec<f64>,
    pub events: Vec<LoadEvent>,
}

impl LoadProfile {
    pub fn constant(demand: Vec<f64>) -> Self {
        Self { initial: demand, events: Vec::new() }
    }

    /// Zero demand until `at`, then `demand`.
    pub fn step(at: f64, demand: Vec<f64>) -> Self {
        Self { initial: vec![0.0; demand.len()], events: vec![LoadEvent { t: at, demand }] }
    }

    pub fn final_demand(&self) -> &[f64] {
        self.events.last().map_or(&self.initial, |e| &e.demand)
    }

    pub fn last_event(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialState {
    /// Everything zero except the configured multiplier start values.
    #[default]
    Flat,
    /// A full state vector in [`Layout`] order.
    Given(Vec<f64>),
}

/// Everything one simulation needs.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: NetworkModel,
    pub controller: ControllerConfig,
    pub delays: DelaySpec,
    pub disturbance: DisturbanceSpec,
    pub load: LoadProfile,
    pub sim: SimConfig,
    pub initial: InitialState,
    /// Storage functionals are evaluated against this point when present.
    pub diagnostics: Option<Equilibrium>,
}

impl RunSpec {
    /// Zero delays, no disturbance, the model's demand switched on at `t = 5`.
    pub fn new(model: NetworkModel, controller: ControllerConfig) -> Self {
        let load = LoadProfile::step(5.0, model.demand());
        Self {
            model,
            controller,
            delays: DelaySpec::Uniform(0.0),
            disturbance: DisturbanceSpec::None,
            load,
            sim: SimConfig::default(),
            initial: InitialState::Flat,
            diagnostics: None,
        }
    }
}

/// Position of every block in the flat state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub eta: Range<usize>,
    pub omega: Range<usize>,
    pub pm: Range<usize>,
    pub ctrl: Range<usize>,
    pub lambda: Range<usize>,
    pub mu: Range<usize>,
    pub chi: Range<usize>,
    pub b: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(topo: &Topology, cfg: &ControllerConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            at += n;
            at - n..at
        };
        let ng = topo.n_gen();
        let eta = take(topo.n_phys());
        let omega = take(ng);
        let pm = take(ng);
        let ctrl = take(cfg.kind.state_len(topo));
        let nb = if cfg.bounds { ng } else { 0 };
        let lambda = take(nb);
        let mu = take(nb);
        let no = if cfg.observer { ng } else { 0 };
        let chi = take(no);
        let b = take(no);
        Self { eta, omega, pm, ctrl, lambda, mu, chi, b, len: at }
    }

    /// Human-readable name of entry `i`.
    pub fn name_of(&self, i: usize, asm: &Assembly) -> String {
        let topo = &asm.topo;
        let label = |j: usize| asm.labels[j].as_str();
        let gen_label = |g: usize| label(topo.generators[g]);
        let line = |e: usize| format!("{}_{}", label(topo.phys[e].0), label(topo.phys[e].1));
        if self.eta.contains(&i) {
            format!("eta_{}", line(i - self.eta.start))
        } else if self.omega.contains(&i) {
            format!("omega_{}", gen_label(i - self.omega.start))
        } else if self.pm.contains(&i) {
            format!("pM_{}", gen_label(i - self.pm.start))
        } else if self.ctrl.contains(&i) {
            let off = i - self.ctrl.start;
            let kind = asm.controller.kind;
            let f = (0..kind.fields().len()).find(|&f| kind.field_range(topo, f).contains(&off)).expect("in block");
            let field = kind.fields()[f];
            let k = off - kind.field_range(topo, f).start;
            if field.per_link {
                let l = &topo.comm[k];
                format!("{}_{}_{}", field.name, label(l.from), label(l.to))
            } else {
                format!("{}_{}", field.name, label(k))
            }
        } else if self.lambda.contains(&i) {
            format!("lambda_{}", gen_label(i - self.lambda.start))
        } else if self.mu.contains(&i) {
            format!("mu_{}", gen_label(i - self.mu.start))
        } else if self.chi.contains(&i) {
            format!("chi_{}", gen_label(i - self.chi.start))
        } else {
            format!("b_{}", gen_label(i - self.b.start))
        }
    }
}

/// Static data of one closed loop, shared by the integrator and the diagnostics.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub topo: Topology,
    pub gens: Vec<GeneratorParams>,
    pub damping: Vec<f64>,
    pub labels: Vec<String>,
    pub controller: ControllerConfig,
    pub layout: Layout,
}

impl Assembly {
    pub fn new(model: &NetworkModel, controller: &ControllerConfig) -> Result<Self, SimError> {
        let violations = validate(model);
        if !violations.is_empty() {
            return Err(SimError::Invalid(violations));
        }
        let topo = Topology::new(model)?;
        let gens = topo.generators.iter().map(|&j| model.buses[j].generator.clone().expect("generator bus")).collect();
        let layout = Layout::new(&topo, controller);
        Ok(Self {
            damping: model.buses.iter().map(|b| b.damping).collect(),
            labels: model.buses.iter().map(|b| b.label.clone()).collect(),
            gens,
            topo,
            controller: controller.clone(),
            layout,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.controller.kind
    }

    /// Flat start: everything zero, bound multipliers at their start value.
    pub fn flat_state(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.layout.len];
        let l = &self.layout;
        for (g, gen) in self.gens.iter().enumerate() {
            if self.controller.bounds {
                if gen.pm_min.is_some() {
                    x[l.lambda.start + g] = self.controller.multiplier_init;
                }
                if gen.pm_max.is_some() {
                    x[l.mu.start + g] = self.controller.multiplier_init;
                }
            }
        }
        x
    }

    /// Slice of controller field `name`, if the controller has it.
    pub fn field<'a>(&self, x: &'a [f64], name: &str) -> Option<&'a [f64]> {
        let kind = self.kind();
        let f = kind.field_index(name)?;
        let r = kind.field_range(&self.topo, f);
        Some(&x[self.layout.ctrl.start + r.start..self.layout.ctrl.start + r.end])
    }

    /// Output `y` of both ends of link `e`, as `[tail, head]`.
    pub fn link_outputs(&self, x: &[f64], e: usize) -> [[f64; 6]; 2] {
        let ctrl = &x[self.layout.ctrl.clone()];
        let l = &self.topo.comm[e];
        let same = self.topo.comm_same_area[e];
        [
            controller::wave_output(self.kind(), &self.topo, ctrl, l.from, same),
            controller::wave_output(self.kind(), &self.topo, ctrl, l.to, same),
        ]
    }

    /// Number of frame slots that carry data on link `e`.
    pub fn active_slots(&self, e: usize) -> usize {
        let w = self.kind().frame_width();
        if w == 6 && !self.topo.comm_same_area[e] {
            4
        } else {
            w
        }
    }
}

/// Algebraic quantities at one evaluation point.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub flows: Vec<f64>,
    pub net_outflow: Vec<f64>,
    pub omega: Vec<f64>,
    pub imbalance: Vec<f64>,
    pub recv: Received,
    pub exchanges: Vec<Exchange>,
    broadcast: Vec<[f64; 4]>,
}

impl Workspace {
    fn new(asm: &Assembly) -> Self {
        let (n, m) = (asm.topo.n_buses, asm.topo.n_comm());
        Self {
            flows: vec![0.0; asm.topo.n_phys()],
            net_outflow: vec![0.0; n],
            omega: vec![0.0; n],
            imbalance: vec![0.0; n],
            recv: Received::zeros(m),
            exchanges: vec![Exchange::default(); m],
            broadcast: vec![[0.0; 4]; n],
        }
    }
}

/// Flows, net outflows and every bus frequency for state `x` under `demand`.
pub fn network_state(asm: &Assembly, x: &[f64], demand: &[f64], ws: &mut Workspace) {
    let topo = &asm.topo;
    let l = &asm.layout;
    let eta = &x[l.eta.clone()];
    ws.net_outflow.iter_mut().for_each(|v| *v = 0.0);
    for (e, &(a, b)) in topo.phys.iter().enumerate() {
        let p = topo.susceptance[e] * eta[e].sin();
        ws.flows[e] = p;
        ws.net_outflow[a] += p;
        ws.net_outflow[b] -= p;
    }
    for j in 0..topo.n_buses {
        ws.omega[j] = match topo.gen_of_bus[j] {
            Some(g) => x[l.omega.start + g],
            None => (-demand[j] - ws.net_outflow[j]) / asm.damping[j],
        };
    }
}

/// Demand estimate of every bus: the observer state at generators and the
/// balance-derived value at loads.
pub fn demand_estimate(asm: &Assembly, x: &[f64], ws: &Workspace, j: usize) -> f64 {
    match asm.topo.gen_of_bus[j] {
        Some(g) => x[asm.layout.chi.start + g],
        None => controller::observer_load_estimate(ws.omega[j], asm.damping[j], ws.net_outflow[j]),
    }
}

struct Engine<'a> {
    asm: &'a Assembly,
    delays: LinkDelays,
    interp: Interpolation,
    raw: Vec<History>,
    links: Vec<ScatterLink>,
    disturbance: Disturbance,
}

impl Engine<'_> {
    /// Right-hand side at `(t, x)`; leaves the algebraic quantities in `ws`.
    fn eval(&self, t: f64, demand: &[f64], x: &[f64], ws: &mut Workspace, dx: &mut [f64]) -> Result<(), SimError> {
        let asm = self.asm;
        let topo = &asm.topo;
        let l = &asm.layout;
        let kind = asm.kind();
        network_state(asm, x, demand, ws);
        for j in 0..topo.n_buses {
            let pm = topo.gen_of_bus[j].map_or(0.0, |g| x[l.pm.start + g]);
            let est = if asm.controller.observer { demand_estimate(asm, x, ws, j) } else { demand[j] };
            ws.imbalance[j] = pm - est;
        }
        let ctrl = &x[l.ctrl.clone()];
        if kind.uses_scattering() {
            for (e, link) in self.links.iter().enumerate() {
                let [y_tail, y_head] = asm.link_outputs(x, e);
                let ex = link.exchange(
                    t,
                    &y_tail,
                    &y_head,
                    self.disturbance.value(t, e, End::Head),
                    self.disturbance.value(t, e, End::Tail),
                    self.interp,
                )?;
                ws.recv.at_tail[e] = ex.r_tail;
                ws.recv.at_head[e] = ex.r_head;
                ws.exchanges[e] = ex;
            }
        } else {
            for j in 0..topo.n_buses {
                ws.broadcast[j] = controller::raw_broadcast(kind, topo, ctrl, j);
            }
            for (e, line) in topo.comm.iter().enumerate() {
                for (end, from, delay) in
                    [(End::Head, line.from, self.delays.to_head[e]), (End::Tail, line.to, self.delays.to_tail[e])]
                {
                    let slot = ws.recv.get_mut(e, end);
                    if delay == 0.0 {
                        slot[..4].copy_from_slice(&ws.broadcast[from]);
                    } else {
                        channel::raw_delayed_lookup(
                            &self.raw[from],
                            t,
                            delay,
                            &ws.broadcast[from],
                            self.interp,
                            &mut slot[..4],
                        )?;
                    }
                    channel::inject_disturbance(&mut slot[..4], self.disturbance.value(t, e, end));
                }
            }
        }
        controller::derivatives(kind, topo, ctrl, &ws.recv, &ws.imbalance, &mut dx[l.ctrl.clone()]);
        let pc = asm.field(x, "pc").expect("power command");
        for (e, &(a, b)) in topo.phys.iter().enumerate() {
            dx[l.eta.start + e] = ws.omega[a] - ws.omega[b];
        }
        for (g, &j) in topo.generators.iter().enumerate() {
            let gen = &asm.gens[g];
            let pm = x[l.pm.start + g];
            let omega = ws.omega[j];
            let u = if asm.controller.bounds {
                let (lam, mu) = (x[l.lambda.start + g], x[l.mu.start + g]);
                let lo = gen.pm_min.map_or(0.0, |lo| 2.0 * lam * (lo - pm));
                let hi = gen.pm_max.map_or(0.0, |hi| 2.0 * mu * (pm - hi));
                dx[l.lambda.start + g] = lo;
                dx[l.mu.start + g] = hi;
                generation_input_bounded(pc[j], omega, pm, lam, mu, gen)
            } else {
                generation_input(pc[j], omega, pm, gen)
            };
            dx[l.omega.start + g] =
                (-demand[j] + pm - asm.damping[j] * omega - ws.net_outflow[j]) / gen.inertia;
            dx[l.pm.start + g] = (-pm + gen.k_g * u) / gen.tau;
            if asm.controller.observer {
                let (dchi, db) = controller::observer_derivatives(
                    x[l.chi.start + g],
                    x[l.b.start + g],
                    omega,
                    pc[j],
                    pm,
                    asm.damping[j],
                    ws.net_outflow[j],
                    gen.inertia,
                    asm.controller.observer_tau,
                );
                dx[l.chi.start + g] = dchi;
                dx[l.b.start + g] = db;
            }
        }
        Ok(())
    }

    /// Stores the frames and broadcasts of the current grid point.
    fn record(&mut self, ws: &Workspace) {
        if self.asm.kind().uses_scattering() {
            for (link, ex) in self.links.iter_mut().zip(&ws.exchanges) {
                link.record(ex);
            }
        } else if !self.raw.is_empty() {
            for (hist, b) in self.raw.iter_mut().zip(&ws.broadcast) {
                hist.push(b);
            }
        }
    }

    fn multipliers_positive(&self, x: &[f64]) -> bool {
        let l = &self.asm.layout;
        self.asm.gens.iter().enumerate().all(|(g, gen)| {
            (gen.pm_min.is_none() || x[l.lambda.start + g] > 0.0) && (gen.pm_max.is_none() || x[l.mu.start + g] > 0.0)
        }) || !self.asm.controller.bounds
    }

    fn single_step(
        &self,
        method: Method,
        t: f64,
        x: &[f64],
        k1: &[f64],
        h: f64,
        demand: &[f64],
        ws: &mut Workspace,
    ) -> Result<Vec<f64>, SimError> {
        let n = x.len();
        match method {
            Method::Euler => Ok((0..n).map(|i| x[i] + h * k1[i]).collect()),
            Method::Rk4 => {
                let mut k2 = vec![0.0; n];
                let mut k3 = vec![0.0; n];
                let mut k4 = vec![0.0; n];
                let mut tmp: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
                self.eval(t + 0.5 * h, demand, &tmp, ws, &mut k2)?;
                (0..n).for_each(|i| tmp[i] = x[i] + 0.5 * h * k2[i]);
                self.eval(t + 0.5 * h, demand, &tmp, ws, &mut k3)?;
                (0..n).for_each(|i| tmp[i] = x[i] + h * k3[i]);
                self.eval(t + h, demand, &tmp, ws, &mut k4)?;
                Ok((0..n).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
            }
        }
    }

    /// One step, halved recursively while a multiplier would turn non-positive.
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &self,
        method: Method,
        t: f64,
        x: &[f64],
        k1: Option<&[f64]>,
        h: f64,
        demand: &[f64],
        ws: &mut Workspace,
        depth: usize,
    ) -> Result<Vec<f64>, SimError> {
        let owned;
        let k1 = match k1 {
            Some(k) => k,
            None => {
                let mut k = vec![0.0; x.len()];
                self.eval(t, demand, x, ws, &mut k)?;
                owned = k;
                &owned
            }
        };
        let next = self.single_step(method, t, x, k1, h, demand, ws)?;
        if self.multipliers_positive(&next) {
            return Ok(next);
        }
        if depth >= 30 {
            return Err(SimError::MultiplierCollapse { t });
        }
        let mid = self.advance(method, t, x, Some(k1), 0.5 * h, demand, ws, depth + 1)?;
        self.advance(method, t + 0.5 * h, &mid, None, 0.5 * h, demand, ws, depth + 1)
    }
}

/// Summary numbers of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    /// First time after the last load event from which `|omega|` stays below
    /// the threshold; `None` if it never settles.
    pub settling_time: Option<f64>,
    pub terminal_omega: f64,
    pub terminal_pm: Vec<f64>,
    /// Optimal dispatch for the final demand, when feasible.
    pub oracle_pm: Option<Vec<f64>>,
    pub terminal_pm_error: Option<f64>,
    pub terminal_area_flows: Vec<f64>,
    /// Largest deviation of the area flows from their schedules.
    pub terminal_area_flow_error: Option<f64>,
    /// Some line angle reached `pi / 2`.
    pub angle_violation: bool,
    /// Smallest bound multiplier seen on the step grid.
    pub min_multiplier: Option<f64>,
    /// Largest gap between a decoded value and the sender's true value.
    pub max_decode_deviation: Option<f64>,
}

/// Storage-function checks gathered while integrating.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsSummary {
    /// Total storage at the last load event (or `t = 0`).
    pub v_reference: f64,
    pub v_final: f64,
    /// Largest one-step increase of the total storage after the last event.
    pub max_increment: f64,
    /// Largest shortfall of the controller-side dissipation inequality, per unit time.
    pub controller_passivity_gap: Option<f64>,
    /// Largest shortfall of the channel dissipation inequality, per unit time.
    pub channel_passivity_gap: Option<f64>,
    pub min_channel_storage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub columns: Vec<String>,
    /// Row-major samples.
    pub data: Vec<f64>,
    pub metrics: Metrics,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub final_state: Vec<f64>,
    pub delays: LinkDelays,
}

impl Trajectory {
    pub fn n_rows(&self) -> usize {
        self.data.len() / self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.columns.len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.data.iter().skip(c).step_by(self.columns.len()).copied().collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for i in 0..self.n_rows() {
            let row = self.row(i);
            for (c, v) in row.iter().enumerate() {
                if c > 0 {
                    w.write_all(b",")?;
                }
                write!(w, "{v:.16e}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn columns(asm: &Assembly, has_areas: bool, diagnostics: bool) -> Vec<String> {
    let topo = &asm.topo;
    let lab = &asm.labels;
    let mut cols = vec!["t".to_string()];
    cols.extend(lab.iter().map(|b| format!("omega_{b}")));
    cols.extend(topo.generators.iter().map(|&j| format!("pM_{}", lab[j])));
    let kind = asm.kind();
    for (f, field) in kind.fields().iter().enumerate() {
        let r = kind.field_range(topo, f);
        for k in 0..r.len() {
            cols.push(if field.per_link {
                let l = &topo.comm[k];
                format!("{}_{}_{}", field.name, lab[l.from], lab[l.to])
            } else {
                format!("{}_{}", field.name, lab[k])
            });
        }
    }
    let l = &asm.layout;
    for i in l.lambda.start..l.b.end {
        cols.push(l.name_of(i, asm));
    }
    cols.extend(topo.phys.iter().map(|&(a, b)| format!("flow_{}_{}", lab[a], lab[b])));
    if has_areas {
        cols.extend((0..topo.n_areas).map(|k| format!("areaflow_{}", k + 1)));
    }
    if diagnostics {
        cols.extend(["V_B", "V_S", "V_all"].map(String::from));
    }
    cols
}

/// Oracle dispatch matching the controller's problem.
pub fn oracle_for(model: &NetworkModel, cfg: &ControllerConfig) -> Result<opt::DispatchSolution, OptError> {
    if cfg.kind.is_tieline() && !model.areas.is_empty() {
        opt::solve_tieline_dispatch(model)
    } else if cfg.bounds {
        opt::solve_bounded_dispatch(model)
    } else {
        opt::solve_dispatch(model)
    }
}

struct Tracker {
    h: f64,
    last_event: f64,
    threshold: f64,
    last_unsettled: Option<f64>,
    angle_violation: bool,
    min_multiplier: Option<f64>,
    max_decode: Option<f64>,
}

/// Integrates the closed loop described by `spec`.
pub fn run(spec: &RunSpec) -> Result<Trajectory, SimError> {
    let sim = &spec.sim;
    if !(sim.h > 0.0 && sim.t_end > 0.0 && sim.h.is_finite() && sim.t_end.is_finite()) {
        return Err(SimError::Config(format!("need h > 0 and t_end > 0, got h = {}, t_end = {}", sim.h, sim.t_end)));
    }
    if sim.record_every == 0 {
        return Err(SimError::Config("record_every must be at least 1".into()));
    }
    let n_bus = spec.model.n_buses();
    if spec.load.initial.len() != n_bus || spec.load.events.iter().any(|e| e.demand.len() != n_bus) {
        return Err(SimError::Config(format!("demand vectors must have {n_bus} entries")));
    }
    if spec.load.events.windows(2).any(|w| w[1].t < w[0].t) || spec.load.events.iter().any(|e| e.t < 0.0) {
        return Err(SimError::Config("load events must be non-negative and time-sorted".into()));
    }
    let asm = Assembly::new(&spec.model, &spec.controller)?;
    let topo = &asm.topo;
    let h = sim.h;
    let delays = channel::resolve_delays(&spec.delays, topo)?;
    for &d in delays.to_head.iter().chain(&delays.to_tail) {
        if d > 0.0 && d < h * (1.0 - 1e-9) {
            return Err(SimError::DelayBelowStep { delay: d, h });
        }
    }
    let disturbance = Disturbance::new(&spec.disturbance, topo.n_comm())?;
    let final_model = spec.model.with_demand(spec.load.final_demand());
    let oracle = oracle_for(&final_model, &spec.controller).ok();

    let x0 = match &spec.initial {
        InitialState::Flat => asm.flat_state(),
        InitialState::Given(x) if x.len() == asm.layout.len => x.clone(),
        InitialState::Given(x) => {
            return Err(SimError::Config(format!("initial state has {} entries, expected {}", x.len(), asm.layout.len)))
        }
    };

    let mut ws = Workspace::new(&asm);
    let demand0 = &spec.load.initial;
    let kind = asm.kind();
    let interp = sim.interpolation;
    let max_delay = delays.max();
    let (raw, links) = if kind.uses_scattering() {
        network_state(&asm, &x0, demand0, &mut ws);
        let links = (0..topo.n_comm())
            .map(|e| {
                let w = kind.frame_width();
                let active = asm.active_slots(e);
                let pre = match sim.prehistory {
                    Prehistory::Zero => Exchange::default(),
                    Prehistory::Steady => {
                        let [yt, yh] = asm.link_outputs(&x0, e);
                        channel::instant_exchange(w, active, &yt, &yh, 0.0, 0.0)
                    }
                };
                let l = &topo.comm[e];
                ScatterLink::new(
                    l.from,
                    l.to,
                    w,
                    active,
                    (delays.to_head[e], delays.to_tail[e]),
                    h,
                    [&pre.s_tail, &pre.s_head],
                )
            })
            .collect();
        (Vec::new(), links)
    } else if max_delay > 0.0 {
        let ctrl = &x0[asm.layout.ctrl.clone()];
        let raw = (0..topo.n_buses)
            .map(|j| History::new(h, controller::raw_broadcast(kind, topo, ctrl, j).to_vec(), max_delay))
            .collect();
        (raw, Vec::new())
    } else {
        (Vec::new(), Vec::new())
    };
    let mut engine = Engine { asm: &asm, delays: delays.clone(), interp, raw, links, disturbance };

    let n_steps = (sim.t_end / h).round() as usize;
    let event_steps: Vec<usize> = spec.load.events.iter().map(|e| (e.t / h).round() as usize).collect();
    let last_event = event_steps.last().map_or(0.0, |&k| k as f64 * h);
    let has_areas = !spec.model.areas.is_empty();
    let cols = columns(&asm, has_areas, spec.diagnostics.is_some());
    let mut data = Vec::with_capacity(cols.len() * (n_steps / sim.record_every + 2));
    let mut tracker = Tracker {
        h,
        last_event,
        threshold: sim.settle_threshold,
        last_unsettled: None,
        angle_violation: false,
        min_multiplier: None,
        max_decode: None,
    };
    let mut diag = spec
        .diagnostics
        .as_ref()
        .map(|eq| lyapunov::InlineDiagnostics::new(&asm, eq, &delays, h, last_event, &engine_prehistory(&engine)));

    let mut x = x0;
    let mut k1 = vec![0.0; x.len()];
    let mut regime = 0;
    for n in 0..=n_steps {
        let t = n as f64 * h;
        while regime < event_steps.len() && event_steps[regime] <= n {
            regime += 1;
        }
        let demand = if regime == 0 { &spec.load.initial } else { &spec.load.events[regime - 1].demand };
        engine.disturbance.begin_step();
        engine.eval(t, demand, &x, &mut ws, &mut k1)?;
        engine.record(&ws);
        observe(&asm, &engine, &mut tracker, t, &x, &ws);
        let diag_values = diag.as_mut().map(|d| d.observe(&asm, t, &x, &ws));
        if n % sim.record_every == 0 || n == n_steps {
            data.push(t);
            data.extend_from_slice(&ws.omega);
            data.extend_from_slice(&x[asm.layout.pm.clone()]);
            data.extend_from_slice(&x[asm.layout.ctrl.clone()]);
            data.extend_from_slice(&x[asm.layout.lambda.start..asm.layout.b.end]);
            data.extend_from_slice(&ws.flows);
            if has_areas {
                data.extend(topo.area_flows(&ws.flows));
            }
            if let Some([vb, vs, va]) = diag_values {
                data.extend([vb, vs, va]);
            }
        }
        if n == n_steps {
            break;
        }
        let next = engine.advance(sim.method, t, &x, Some(&k1), h, demand, &mut ws, 0)?;
        check_state(&asm, &next, t + h, sim.divergence_limit)?;
        x = next;
    }

    let omega = ws.omega.clone();
    let terminal_omega = omega.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let terminal_pm = x[asm.layout.pm.clone()].to_vec();
    let terminal_pm_error = oracle
        .as_ref()
        .map(|o| terminal_pm.iter().zip(&o.pm).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
    let terminal_area_flows = if has_areas { topo.area_flows(&ws.flows) } else { Vec::new() };
    let terminal_area_flow_error = has_areas.then(|| {
        terminal_area_flows.iter().zip(&spec.model.areas).fold(0.0f64, |m, (f, a)| m.max((f - a.schedule).abs()))
    });
    let settling_time = match tracker.last_unsettled {
        None => Some(last_event),
        Some(t) if t >= n_steps as f64 * h - 0.5 * h => None,
        Some(t) => Some(t + h),
    };
    let metrics = Metrics {
        settling_time,
        terminal_omega,
        terminal_pm,
        oracle_pm: oracle.map(|o| o.pm),
        terminal_pm_error,
        terminal_area_flows,
        terminal_area_flow_error,
        angle_violation: tracker.angle_violation,
        min_multiplier: tracker.min_multiplier,
        max_decode_deviation: tracker.max_decode,
    };
    Ok(Trajectory {
        columns: cols,
        data,
        metrics,
        diagnostics: diag.map(|d| d.summary()),
        final_state: x,
        delays,
    })
}

fn engine_prehistory(engine: &Engine) -> Vec<[Vec<f64>; 2]> {
    engine
        .links
        .iter()
        .map(|l| [l.to_head.history.prehistory().to_vec(), l.to_tail.history.prehistory().to_vec()])
        .collect()
}

fn observe(asm: &Assembly, engine: &Engine, tr: &mut Tracker, t: f64, x: &[f64], ws: &Workspace) {
    let l = &asm.layout;
    if t >= tr.last_event - 0.5 * tr.h {
        let w = ws.omega.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if w >= tr.threshold {
            tr.last_unsettled = Some(t);
        }
    }
    if !tr.angle_violation && x[l.eta.clone()].iter().any(|e| e.abs() >= FRAC_PI_2) {
        tr.angle_violation = true;
        log::warn!("line angle reached pi/2 at t = {t}");
    }
    if asm.controller.bounds {
        for (g, gen) in asm.gens.iter().enumerate() {
            for (present, v) in [(gen.pm_min.is_some(), x[l.lambda.start + g]), (gen.pm_max.is_some(), x[l.mu.start + g])] {
                if present {
                    tr.min_multiplier = Some(tr.min_multiplier.map_or(v, |m: f64| m.min(v)));
                }
            }
        }
    }
    if asm.kind().uses_scattering() {
        let mut dev = tr.max_decode.unwrap_or(0.0);
        for (e, ex) in ws.exchanges.iter().enumerate() {
            let [mut yt, mut yh] = asm.link_outputs(x, e);
            let w = engine.links[e].width;
            channel::rotate(&mut yt[..w]);
            channel::rotate(&mut yh[..w]);
            for k in 0..asm.active_slots(e) {
                dev = dev.max((ex.r_head[k] - yt[k]).abs()).max((ex.r_tail[k] - yh[k]).abs());
            }
        }
        tr.max_decode = Some(dev);
    }
}

fn check_state(asm: &Assembly, x: &[f64], t: f64, limit: f64) -> Result<(), SimError> {
    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(SimError::NonFinite { variable: asm.layout.name_of(i, asm), t, value: v });
        }
        if v.abs() > limit {
            return Err(SimError::Diverged { variable: asm.layout.name_of(i, asm), t, value: v });
        }
    }
    Ok(())
}
