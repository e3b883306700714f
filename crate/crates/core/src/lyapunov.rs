//! Storage functions and equilibrium points used to certify simulated
//! trajectories.
//!
//! The total storage is the controller-side part (kinetic, potential,
//! generation and controller quadratics, plus the multiplier and observer terms
//! when active) plus one window integral per link direction of the squared
//! distance between sent frames and their equilibrium values.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{self, LinkDelays};
use crate::controller::ControllerKind;
use crate::dde::{self, Assembly, RunSpec, SimError, Trajectory, Workspace};
use crate::network::{laplacian, Line, NetworkModel};
use crate::opt::{self, DispatchSolution};

/// Equilibrium values of both ends of one link, as `[tail, head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkEquilibrium {
    pub y: [[f64; 6]; 2],
    pub r: [[f64; 6]; 2],
    pub s: [[f64; 6]; 2],
}

/// An equilibrium of the closed loop, in [`dde::Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub state: Vec<f64>,
    pub demand: Vec<f64>,
    pub dispatch: DispatchSolution,
    /// Empty unless the controller uses wave variables.
    pub links: Vec<LinkEquilibrium>,
}

/// Solves `(L + c c^T) x = rhs` where the rank-one terms pin the null space.
fn pinned_solve(l: &DMatrix<f64>, groups: &[Vec<usize>], rhs: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut a = l.clone();
    for g in groups {
        let w = 1.0 / g.len() as f64;
        for &i in g {
            for &j in g {
                a[(i, j)] += w;
            }
        }
    }
    let x = a.lu().solve(&DVector::from_column_slice(rhs)).expect("connected graph gives a regular system");
    (0..n).map(|i| x[i]).collect()
}

impl Equilibrium {
    /// Builds the equilibrium for `model` (whose demand is the one in force)
    /// from the dispatch oracle, a power-flow solve and the controller's
    /// steady-state equations. Free additive constants are set to zero mean.
    pub fn build(asm: &Assembly, model: &NetworkModel) -> Result<Self, SimError> {
        let topo = &asm.topo;
        let l = &asm.layout;
        let n = topo.n_buses;
        let kind = asm.kind();
        let dispatch = dde::oracle_for(model, &asm.controller)?;
        let pf = opt::solve_power_flow(model, &opt::injections(model, &dispatch))?;
        let demand = model.demand();
        let mut x = vec![0.0; l.len];
        x[l.eta.clone()].copy_from_slice(&pf.eta);
        x[l.pm.clone()].copy_from_slice(&dispatch.pm);

        let tie = kind.is_tieline() && !model.areas.is_empty();
        let price: Vec<f64> =
            (0..n).map(|j| if tie { dispatch.beta[topo.area_of_bus[j]] } else { dispatch.beta[0] }).collect();
        let mut imb: Vec<f64> = demand.iter().map(|d| -d).collect();
        for (g, &j) in topo.generators.iter().enumerate() {
            imb[j] += dispatch.pm[g];
        }
        let all: Vec<usize> = (0..n).collect();
        let lap = laplacian(&topo.comm, n)?;
        let set = |x: &mut Vec<f64>, name: &str, v: &[f64]| {
            if let Some(f) = kind.field_index(name) {
                let r = kind.field_range(topo, f);
                x[l.ctrl.start + r.start..l.ctrl.start + r.end].copy_from_slice(v);
            }
        };
        set(&mut x, "pc", &price);
        match kind {
            ControllerKind::Naive => {
                let unit: Vec<Line> = topo.comm.iter().map(|c| Line { weight: 1.0, ..*c }).collect();
                let z = pinned_solve(&laplacian(&unit, n)?, &[all.clone()], &imb);
                let psi: Vec<f64> = topo.comm.iter().map(|c| z[c.to] - z[c.from]).collect();
                set(&mut x, "psi_tail", &psi);
                set(&mut x, "psi_head", &psi);
            }
            ControllerKind::Xi => set(&mut x, "xi", &imb),
            _ => {
                let zeta = pinned_solve(&lap, &[all.clone()], &imb);
                set(&mut x, "zeta", &zeta);
            }
        }
        if kind.is_tieline() {
            set(&mut x, "pi", &price);
            let intra: Vec<Line> =
                topo.comm.iter().zip(&topo.comm_same_area).filter(|(_, s)| **s).map(|(c, _)| *c).collect();
            let groups: Vec<Vec<usize>> =
                (0..topo.n_areas).map(|k| (0..n).filter(|&j| topo.area_of_bus[j] == k).collect()).collect();
            let rhs: Vec<f64> = (0..n).map(|j| imb[j] + topo.informed_schedule[j]).collect();
            let phi = pinned_solve(&laplacian(&intra, n)?, &groups, &rhs);
            set(&mut x, "phi", &phi);
        }
        if asm.controller.bounds {
            for (g, gen) in asm.gens.iter().enumerate() {
                if gen.pm_min.is_some() {
                    x[l.lambda.start + g] = dispatch.lambda_bar[g].max(0.0).sqrt();
                }
                if gen.pm_max.is_some() {
                    x[l.mu.start + g] = dispatch.mu_bar[g].max(0.0).sqrt();
                }
            }
        }
        if asm.controller.observer {
            for (g, &j) in topo.generators.iter().enumerate() {
                x[l.chi.start + g] = demand[j];
                x[l.b.start + g] = demand[j] + price[j];
            }
        }
        let mut eq = Self { state: x, demand, dispatch, links: Vec::new() };
        eq.refresh_links(asm);
        Ok(eq)
    }

    fn refresh_links(&mut self, asm: &Assembly) {
        self.links.clear();
        if !asm.kind().uses_scattering() {
            return;
        }
        let w = asm.kind().frame_width();
        for e in 0..asm.topo.n_comm() {
            let [yt, yh] = asm.link_outputs(&self.state, e);
            let ex = channel::instant_exchange(w, asm.active_slots(e), &yt, &yh, 0.0, 0.0);
            self.links.push(LinkEquilibrium { y: [yt, yh], r: [ex.r_tail, ex.r_head], s: [ex.s_tail, ex.s_head] });
        }
    }

    /// Moves the free constants (the common offset of `zeta` and `pi`, the
    /// per-area offset of `phi`) to those of `terminal`, a state near the set
    /// of equilibria.
    pub fn align_with(&mut self, asm: &Assembly, terminal: &[f64]) {
        let topo = &asm.topo;
        let kind = asm.kind();
        let start = asm.layout.ctrl.start;
        let mut shift = |name: &str, groups: &[Vec<usize>]| {
            if let Some(f) = kind.field_index(name) {
                let r = kind.field_range(topo, f);
                for g in groups {
                    let mean = g.iter().map(|&j| terminal[start + r.start + j] - self.state[start + r.start + j]).sum::<f64>()
                        / g.len() as f64;
                    for &j in g {
                        self.state[start + r.start + j] += mean;
                    }
                }
            }
        };
        let all = vec![(0..topo.n_buses).collect::<Vec<_>>()];
        shift("zeta", &all);
        if kind.is_tieline() {
            shift("pi", &all);
            let areas: Vec<Vec<usize>> = (0..topo.n_areas)
                .map(|k| (0..topo.n_buses).filter(|&j| topo.area_of_bus[j] == k).collect())
                .collect();
            shift("phi", &areas);
        }
        self.refresh_links(asm);
    }
}

/// Line potential `Y (cos eta* - cos eta - sin eta* (eta - eta*))`, the
/// integral of `Y (sin s - sin eta*)` from `eta*` to `eta`.
pub fn line_potential(y: f64, eta: f64, eta_star: f64) -> f64 {
    y * (eta_star.cos() - eta.cos() - eta_star.sin() * (eta - eta_star))
}

/// `1/2 sum (x - x*)^2`.
pub fn half_square(x: &[f64], x_star: &[f64]) -> f64 {
    0.5 * x.iter().zip(x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

/// Quadratic of a state with its parallel compensator:
/// `1/2 sum rho^2 + 1/2 sum (x - rho - x*)^2`.
pub fn compensated_square(x: &[f64], rho: &[f64], x_star: &[f64]) -> f64 {
    0.5 * x.iter().zip(rho).zip(x_star).map(|((a, r), s)| r * r + (a - r - s).powi(2)).sum::<f64>()
}

/// Multiplier storage `1/4 (l^2 - l*^2) - 1/2 l*^2 (ln l - ln l*)`, with
/// `x ln x = 0` at zero. Needs `l > 0` unless `l* = 0`.
pub fn multiplier_storage(l: f64, l_star: f64) -> f64 {
    let log_term = if l_star == 0.0 { 0.0 } else { 0.5 * l_star * l_star * (l.ln() - l_star.ln()) };
    0.25 * (l * l - l_star * l_star) - log_term
}

/// Controller-side storage split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub kinetic: f64,
    pub potential: f64,
    pub generation: f64,
    /// Power command (with its compensator when present).
    pub command: f64,
    /// `zeta`, `xi` or the edge states (with compensator when present).
    pub consensus: f64,
    /// `pi` and `phi` terms of the tie-line law.
    pub tieline: f64,
    pub multipliers: f64,
    pub observer: f64,
}

impl Components {
    pub fn total(&self) -> f64 {
        self.kinetic
            + self.potential
            + self.generation
            + self.command
            + self.consensus
            + self.tieline
            + self.multipliers
            + self.observer
    }
}

/// Evaluates every controller-side storage term at `x`.
pub fn components(asm: &Assembly, x: &[f64], eq: &Equilibrium) -> Components {
    let topo = &asm.topo;
    let l = &asm.layout;
    let xs = &eq.state;
    let kind = asm.kind();
    let mut c = Components::default();
    for (g, gen) in asm.gens.iter().enumerate() {
        c.kinetic += 0.5 * gen.inertia * (x[l.omega.start + g] - xs[l.omega.start + g]).powi(2);
        c.generation +=
            gen.tau / (2.0 * gen.k_g * gen.k_c) * (x[l.pm.start + g] - xs[l.pm.start + g]).powi(2);
    }
    for e in 0..topo.n_phys() {
        c.potential += line_potential(topo.susceptance[e], x[l.eta.start + e], xs[l.eta.start + e]);
    }
    let f = |v: &[f64], name: &str| asm.field(v, name).expect("field of this controller").to_vec();
    let pair = |name: &str, rho: &str| compensated_square(&f(x, name), &f(x, rho), &f(xs, name));
    let plain = |name: &str| half_square(&f(x, name), &f(xs, name));
    match kind {
        ControllerKind::Naive => {
            c.command = plain("pc");
            c.consensus = 0.5 * (plain("psi_tail") + plain("psi_head"));
        }
        ControllerKind::Xi => {
            c.command = plain("pc");
            c.consensus = plain("xi");
        }
        ControllerKind::Reform => {
            c.command = plain("pc");
            c.consensus = plain("zeta");
        }
        ControllerKind::TieLine => {
            c.command = plain("pc");
            c.consensus = plain("zeta");
            c.tieline = plain("pi") + plain("phi");
        }
        ControllerKind::Scatter => {
            c.command = pair("pc", "rho_p");
            c.consensus = pair("zeta", "rho_zeta");
        }
        ControllerKind::TieLineScatter => {
            c.command = pair("pc", "rho_p");
            c.consensus = pair("zeta", "rho_zeta");
            c.tieline = pair("pi", "rho_pi") + pair("phi", "rho_phi");
        }
    }
    if asm.controller.bounds {
        for g in 0..asm.gens.len() {
            for r in [&l.lambda, &l.mu] {
                c.multipliers += multiplier_storage(x[r.start + g], xs[r.start + g]);
            }
        }
    }
    if asm.controller.observer {
        for (g, gen) in asm.gens.iter().enumerate() {
            let db = x[l.b.start + g] - xs[l.b.start + g];
            let dw = x[l.omega.start + g] - xs[l.omega.start + g];
            let dchi = x[l.chi.start + g] - xs[l.chi.start + g];
            c.observer += 0.5 * (gen.inertia * (db - dw).powi(2) + asm.controller.observer_tau * dchi * dchi);
        }
    }
    c
}

/// Running `integral over [t - delay, t] of g` for samples `g` pushed on the
/// step grid, with `g` piecewise linear and equal to `pre` before `t = 0`.
#[derive(Debug, Clone)]
pub struct WindowIntegral {
    h: f64,
    delay: f64,
    pre: f64,
    first: usize,
    len: usize,
    keep: usize,
    g: VecDeque<f64>,
    cum: VecDeque<f64>,
}

impl WindowIntegral {
    pub fn new(h: f64, delay: f64, pre: f64) -> Self {
        let keep = (delay / h).ceil() as usize + 3;
        Self { h, delay, pre, first: 0, len: 0, keep, g: VecDeque::new(), cum: VecDeque::new() }
    }

    pub fn push(&mut self, g: f64) {
        let cum = match (self.g.back(), self.cum.back()) {
            (Some(&gl), Some(&cl)) => cl + 0.5 * self.h * (gl + g),
            _ => 0.0,
        };
        self.g.push_back(g);
        self.cum.push_back(cum);
        self.len += 1;
        if self.len - self.first > self.keep {
            self.g.pop_front();
            self.cum.pop_front();
            self.first += 1;
        }
    }

    /// Integral of `g` from 0 to `tau`, negative for `tau < 0`.
    fn primitive(&self, tau: f64) -> f64 {
        if tau < 0.0 {
            return tau * self.pre;
        }
        let last = self.len - 1;
        let s = tau / self.h;
        let k = (s.floor() as usize).clamp(self.first, last);
        if k == last {
            return self.cum[k - self.first];
        }
        let theta = s - k as f64;
        let (gk, gk1) = (self.g[k - self.first], self.g[k + 1 - self.first]);
        let g_tau = gk + theta * (gk1 - gk);
        self.cum[k - self.first] + 0.5 * self.h * theta * (gk + g_tau)
    }

    /// Window integral ending at the last pushed sample.
    pub fn value(&self) -> f64 {
        if self.len == 0 || self.delay == 0.0 {
            return 0.0;
        }
        let t = (self.len - 1) as f64 * self.h;
        self.cum[self.len - 1 - self.first] - self.primitive(t - self.delay)
    }
}

/// Integral of the piecewise-linear interpolant of `samples` (taken at
/// `k h`) over `[t_n - delay, t_n]`, where `t_n` is the last sample time and
/// the function equals `pre` before zero. Direct quadrature, no running sums.
pub fn window_storage(samples: &[f64], h: f64, delay: f64, pre: f64) -> f64 {
    let n = samples.len() - 1;
    let t_n = n as f64 * h;
    let lo = t_n - delay;
    let mut total = if lo < 0.0 { (-lo).min(delay) * pre } else { 0.0 };
    for k in 0..n {
        let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
        let (c, d) = (a.max(lo), b);
        if d <= c {
            continue;
        }
        let at = |t: f64| samples[k] + (t - a) / h * (samples[k + 1] - samples[k]);
        total += (d - c) * 0.5 * (at(c) + at(d));
    }
    total
}

/// Largest increase between consecutive samples of `column`.
pub fn monotonicity_probe(trajectory: &Trajectory, column: &str) -> Option<f64> {
    let v = trajectory.column(column)?;
    v.windows(2).map(|w| w[1] - w[0]).reduce(f64::max)
}

/// Tracks `storage(t) - storage(start) <= integral of supply` by trapezoids.
#[derive(Debug, Clone)]
struct DissipationCheck {
    start: f64,
    storage0: Option<f64>,
    prev_supply: f64,
    integral: f64,
    worst: f64,
}

impl DissipationCheck {
    fn new(start: f64) -> Self {
        Self { start, storage0: None, prev_supply: 0.0, integral: 0.0, worst: 0.0 }
    }

    fn update(&mut self, t: f64, h: f64, storage: f64, supply: f64) {
        if t < self.start - 0.5 * h {
            return;
        }
        let Some(s0) = self.storage0 else {
            self.storage0 = Some(storage);
            self.prev_supply = supply;
            return;
        };
        self.integral += 0.5 * h * (self.prev_supply + supply);
        self.prev_supply = supply;
        let slack = self.integral - (storage - s0);
        self.worst = self.worst.max((-slack).max(0.0) / (t - self.start).max(h));
    }
}

/// Storage bookkeeping carried along a run.
#[derive(Debug, Clone)]
pub struct InlineDiagnostics {
    eq: Equilibrium,
    h: f64,
    reference: f64,
    alpha: Vec<f64>,
    windows: Vec<[WindowIntegral; 2]>,
    controller_check: Option<DissipationCheck>,
    channel_checks: Vec<DissipationCheck>,
    prev: Option<f64>,
    v_reference: Option<f64>,
    v_final: f64,
    max_increment: f64,
    min_channel: Option<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl InlineDiagnostics {
    /// `prehistory` holds the frames assumed sent before `t = 0`, per link as
    /// `[by tail, by head]`.
    pub fn new(
        asm: &Assembly,
        eq: &Equilibrium,
        delays: &LinkDelays,
        h: f64,
        reference: f64,
        prehistory: &[[Vec<f64>; 2]],
    ) -> Self {
        let scatter = asm.kind().uses_scattering();
        let windows = if scatter {
            prehistory
                .iter()
                .zip(&eq.links)
                .enumerate()
                .map(|(e, (pre, le))| {
                    [
                        WindowIntegral::new(h, delays.to_head[e], dist2(&pre[0], &le.s[0])),
                        WindowIntegral::new(h, delays.to_tail[e], dist2(&pre[1], &le.s[1])),
                    ]
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            eq: eq.clone(),
            h,
            reference,
            alpha: asm.topo.comm.iter().map(|l| l.weight).collect(),
            channel_checks: if scatter { vec![DissipationCheck::new(0.0); asm.topo.n_comm()] } else { Vec::new() },
            controller_check: scatter.then(|| DissipationCheck::new(reference)),
            windows,
            prev: None,
            v_reference: None,
            v_final: 0.0,
            max_increment: f64::NEG_INFINITY,
            min_channel: None,
        }
    }

    /// Updates all checks at grid time `t`; returns `[controller, channel, total]` storage.
    pub fn observe(&mut self, asm: &Assembly, t: f64, x: &[f64], ws: &Workspace) -> [f64; 3] {
        let core = components(asm, x, &self.eq).total();
        let mut v_s = 0.0;
        let mut supply = 0.0;
        let w = asm.kind().frame_width();
        for (e, ex) in ws.exchanges.iter().enumerate().take(self.windows.len()) {
            let le = &self.eq.links[e];
            let [yt, yh] = asm.link_outputs(x, e);
            self.windows[e][0].push(dist2(&ex.s_tail[..w], &le.s[0][..w]));
            self.windows[e][1].push(dist2(&ex.s_head[..w], &le.s[1][..w]));
            let storage = 0.5 * (self.windows[e][0].value() + self.windows[e][1].value());
            self.min_channel = Some(self.min_channel.map_or(storage, |m: f64| m.min(storage)));
            let mut pairing = 0.0;
            for k in 0..w {
                pairing += (ex.r_tail[k] - le.r[0][k]) * (yt[k] - le.y[0][k]);
                pairing += (ex.r_head[k] - le.r[1][k]) * (yh[k] - le.y[1][k]);
            }
            self.channel_checks[e].update(t, self.h, storage, -pairing);
            v_s += self.alpha[e] * storage;
            supply += self.alpha[e] * pairing;
        }
        if let Some(c) = self.controller_check.as_mut() {
            c.update(t, self.h, core, supply);
        }
        let total = core + v_s;
        if t >= self.reference - 0.5 * self.h {
            if self.v_reference.is_none() {
                self.v_reference = Some(total);
            } else if let Some(p) = self.prev {
                self.max_increment = self.max_increment.max(total - p);
            }
            self.prev = Some(total);
        }
        self.v_final = total;
        [core, v_s, total]
    }

    pub fn summary(&self) -> dde::DiagnosticsSummary {
        dde::DiagnosticsSummary {
            v_reference: self.v_reference.unwrap_or(f64::NAN),
            v_final: self.v_final,
            max_increment: self.max_increment,
            controller_passivity_gap: self.controller_check.as_ref().map(|c| c.worst),
            channel_passivity_gap: (!self.channel_checks.is_empty())
                .then(|| self.channel_checks.iter().fold(0.0, |m: f64, c| m.max(c.worst))),
            min_channel_storage: self.min_channel,
        }
    }
}

/// Runs `spec` twice: once to locate the equilibrium the trajectory settles
/// on, once with the storage functions evaluated against it.
pub fn run_diagnosed(spec: &RunSpec) -> Result<(Trajectory, Equilibrium), SimError> {
    let asm = Assembly::new(&spec.model, &spec.controller)?;
    let mut probe = spec.clone();
    probe.diagnostics = None;
    probe.sim.record_every = usize::MAX / 2;
    let first = dde::run(&probe)?;
    let mut eq = Equilibrium::build(&asm, &spec.model.with_demand(spec.load.final_demand()))?;
    eq.align_with(&asm, &first.final_state);
    let mut full = spec.clone();
    full.diagnostics = Some(eq.clone());
    Ok((dde::run(&full)?, eq))
}

/// Equilibrium plus `amplitude` times a seeded sign pattern. Line angles are
/// shifted through bus angles; multipliers only move upward so they stay positive.
pub fn perturbed_start(asm: &Assembly, eq: &Equilibrium, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = &asm.layout;
    let mut x = eq.state.clone();
    // Line angles move through bus angles so that loop sums stay consistent.
    let theta: Vec<f64> =
        (0..asm.topo.n_buses).map(|_| if rng.gen::<bool>() { amplitude } else { -amplitude }).collect();
    for (k, &(a, b)) in asm.topo.phys.iter().enumerate() {
        x[l.eta.start + k] += theta[a] - theta[b];
    }
    for (i, v) in x.iter_mut().enumerate().skip(l.eta.end) {
        if l.lambda.contains(&i) || l.mu.contains(&i) {
            *v += amplitude;
        } else {
            *v += if rng.gen::<bool>() { amplitude } else { -amplitude };
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn potential_matches_quadrature() {
        let (y, es, e) = (1.3, 0.2, -0.4);
        let m = 20_000;
        let step = (e - es) / m as f64;
        let quad: f64 = (0..m)
            .map(|k| {
                let s = es + (k as f64 + 0.5) * step;
                y * (s.sin() - es.sin()) * step
            })
            .sum();
        assert!((line_potential(y, e, es) - quad).abs() < 1e-10);
        assert!((line_potential(1.0, 0.3, 0.0) - (1.0 - 0.3f64.cos())).abs() < 1e-15);
    }

    #[test]
    fn multiplier_storage_cases() {
        assert_eq!(multiplier_storage(0.7, 0.7), 0.0);
        assert!((multiplier_storage(2.0, 0.0) - 1.0).abs() < 1e-15);
        for (l, ls) in [(0.3, 1.1), (2.0, 0.5), (1.0, 0.0)] {
            assert!(multiplier_storage(l, ls) >= 0.25 * (l - ls) * (l - ls) - 1e-15);
        }
    }

    #[test]
    fn window_of_constant_offset() {
        let mut w = WindowIntegral::new(0.01, 0.5, 1.0);
        for _ in 0..200 {
            w.push(1.0);
        }
        assert!((w.value() - 0.5).abs() < 1e-12);
        let zero = WindowIntegral::new(0.01, 0.0, 1.0);
        assert_eq!(zero.value(), 0.0);
    }

    #[test]
    fn window_matches_direct_quadrature() {
        let h = 0.01;
        let delay = 0.237;
        let mut w = WindowIntegral::new(h, delay, 0.4);
        let mut samples = Vec::new();
        for k in 0..150 {
            let g = (0.05 * k as f64).sin().powi(2) + 0.1;
            samples.push(g);
            w.push(g);
            let direct = window_storage(&samples, h, delay, 0.4);
            assert!((w.value() - direct).abs() < 1e-12, "k = {k}");
        }
    }
}
