//! Optimization oracle for the dispatch problems the controllers are meant to
//! solve: cost-optimal generation meeting total demand, optionally with
//! per-area tie-line schedules or generation bounds.
//!
//! Every problem is separable with a single coupling constraint per area, so the
//! solution is found from the price `beta` alone: each unit produces
//! `(Q')^-1(beta)` clipped to its bounds, and `beta` is bisected until supply
//! matches the area target.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cost::CostFunction;
use crate::network::{GeneratorParams, NetworkModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("demand {load} cannot be served: no generators")]
    NoGenerators { load: f64 },
    #[error("bounds admit total generation in [{min}, {max}] but demand is {load}")]
    InfeasibleBounds { min: f64, max: f64, load: f64 },
    #[error("tie-line schedules sum to {sum}, not zero")]
    InconsistentSchedule { sum: f64 },
    #[error("area {area} has no generators but must produce {target}")]
    AreaInfeasible { area: usize, target: f64 },
    #[error("no area partition configured")]
    NoAreas,
    #[error("power flow did not converge (mismatch {mismatch:e})")]
    PowerFlow { mismatch: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    /// Cost-optimal generation meeting total demand.
    Basic,
    /// Additionally every area imports its scheduled amount.
    TieLine,
    /// Additionally every unit respects its generation bounds.
    Bounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub problem: Problem,
    /// Bus index of each generator.
    pub generators: Vec<usize>,
    pub pm: Vec<f64>,
    /// Marginal price of each area (a single entry unless `problem` is `TieLine`).
    pub beta: Vec<f64>,
    /// Index into `beta` for every generator.
    pub price_index: Vec<usize>,
    /// Multipliers of the lower and upper generation bounds.
    pub lambda_bar: Vec<f64>,
    pub mu_bar: Vec<f64>,
    /// Generation each price group must supply.
    pub targets: Vec<f64>,
}

impl DispatchSolution {
    /// Marginal price seen by generator `g`.
    pub fn price(&self, g: usize) -> f64 {
        self.beta[self.price_index[g]]
    }
}

struct Unit<'a> {
    cost: &'a dyn CostFunction,
    lo: f64,
    hi: f64,
}

impl Unit<'_> {
    fn output(&self, beta: f64) -> f64 {
        self.cost.gradient_inverse(beta).clamp(self.lo, self.hi)
    }
}

struct Group {
    pm: Vec<f64>,
    beta: f64,
    lambda_bar: Vec<f64>,
    mu_bar: Vec<f64>,
}

fn dispatch_group(units: &[Unit], target: f64) -> Result<Group, OptError> {
    if units.is_empty() {
        return Err(OptError::NoGenerators { load: target });
    }
    let min: f64 = units.iter().map(|u| u.lo).sum();
    let max: f64 = units.iter().map(|u| u.hi).sum();
    if target < min || target > max {
        return Err(OptError::InfeasibleBounds { min, max, load: target });
    }
    let quad: Option<Vec<_>> = units.iter().map(|u| u.cost.as_quadratic()).collect();
    let unbounded = units.iter().all(|u| u.lo == f64::NEG_INFINITY && u.hi == f64::INFINITY);
    let beta = match (&quad, unbounded) {
        (Some(q), true) => {
            let c: f64 = q.iter().map(|x| x.c).sum();
            let inv: f64 = q.iter().map(|x| 1.0 / x.q).sum();
            (target - c) / inv
        }
        _ => {
            let supply = |b: f64| units.iter().map(|u| u.output(b)).sum::<f64>() - target;
            let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
            while supply(lo) > 0.0 {
                lo *= 2.0;
            }
            while supply(hi) < 0.0 {
                hi *= 2.0;
            }
            for _ in 0..400 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if supply(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut beta = 0.5 * (lo + hi);
            // With quadratic costs the active set is now known; recompute the
            // price in closed form over the free units.
            if let Some(q) = &quad {
                let mut fixed = 0.0;
                let (mut c, mut inv) = (0.0, 0.0);
                for (u, x) in units.iter().zip(q) {
                    let raw = x.c + beta / x.q;
                    if raw <= u.lo || raw >= u.hi {
                        fixed += raw.clamp(u.lo, u.hi);
                    } else {
                        c += x.c;
                        inv += 1.0 / x.q;
                    }
                }
                if inv > 0.0 {
                    let exact = (target - fixed - c) / inv;
                    let consistent = units.iter().zip(q).all(|(u, x)| {
                        let was = x.c + beta / x.q;
                        let now = x.c + exact / x.q;
                        (was <= u.lo) == (now <= u.lo) && (was >= u.hi) == (now >= u.hi)
                    });
                    if consistent {
                        beta = exact;
                    }
                }
            }
            beta
        }
    };
    let mut pm = Vec::with_capacity(units.len());
    let mut lambda_bar = Vec::with_capacity(units.len());
    let mut mu_bar = Vec::with_capacity(units.len());
    for u in units {
        let raw = u.cost.gradient_inverse(beta);
        let p = raw.clamp(u.lo, u.hi);
        pm.push(p);
        lambda_bar.push(if raw < u.lo { u.cost.gradient(u.lo) - beta } else { 0.0 });
        mu_bar.push(if raw > u.hi { beta - u.cost.gradient(u.hi) } else { 0.0 });
    }
    Ok(Group { pm, beta, lambda_bar, mu_bar })
}

fn units<'a>(gens: &[&'a GeneratorParams], bounded: bool) -> Vec<Unit<'a>> {
    gens.iter()
        .map(|g| Unit {
            cost: g.cost.as_ref(),
            lo: if bounded { g.pm_min.unwrap_or(f64::NEG_INFINITY) } else { f64::NEG_INFINITY },
            hi: if bounded { g.pm_max.unwrap_or(f64::INFINITY) } else { f64::INFINITY },
        })
        .collect()
}

fn generator_params(model: &NetworkModel) -> (Vec<usize>, Vec<&GeneratorParams>) {
    let idx = model.generators();
    let params = idx.iter().map(|&j| model.buses[j].generator.as_ref().expect("generator")).collect();
    (idx, params)
}

fn single_group(model: &NetworkModel, problem: Problem) -> Result<DispatchSolution, OptError> {
    let (generators, gens) = generator_params(model);
    let load: f64 = model.buses.iter().map(|b| b.demand).sum();
    if generators.is_empty() {
        if load == 0.0 {
            return Ok(DispatchSolution {
                problem,
                generators,
                pm: vec![],
                beta: vec![0.0],
                price_index: vec![],
                lambda_bar: vec![],
                mu_bar: vec![],
                targets: vec![0.0],
            });
        }
        return Err(OptError::NoGenerators { load });
    }
    let group = dispatch_group(&units(&gens, problem == Problem::Bounded), load)?;
    Ok(DispatchSolution {
        problem,
        price_index: vec![0; generators.len()],
        generators,
        pm: group.pm,
        beta: vec![group.beta],
        lambda_bar: group.lambda_bar,
        mu_bar: group.mu_bar,
        targets: vec![load],
    })
}

/// Cost-optimal generation meeting total demand. Generation bounds are ignored.
pub fn solve_dispatch(model: &NetworkModel) -> Result<DispatchSolution, OptError> {
    single_group(model, Problem::Basic)
}

/// Cost-optimal generation meeting total demand within generation bounds.
pub fn solve_bounded_dispatch(model: &NetworkModel) -> Result<DispatchSolution, OptError> {
    single_group(model, Problem::Bounded)
}

/// Cost-optimal generation where area `k` imports exactly its schedule, so it
/// must generate its own demand minus the schedule.
pub fn solve_tieline_dispatch(model: &NetworkModel) -> Result<DispatchSolution, OptError> {
    if model.areas.is_empty() {
        return Err(OptError::NoAreas);
    }
    let owner = model.area_of_bus().map_err(|_| OptError::NoAreas)?;
    let sum: f64 = model.areas.iter().map(|a| a.schedule).sum();
    if sum.abs() > 1e-12 {
        return Err(OptError::InconsistentSchedule { sum });
    }
    let (generators, gens) = generator_params(model);
    let n_areas = model.areas.len();
    let mut targets = vec![0.0; n_areas];
    for (j, b) in model.buses.iter().enumerate() {
        targets[owner[j]] += b.demand;
    }
    for (k, a) in model.areas.iter().enumerate() {
        targets[k] -= a.schedule;
    }
    let mut sol = DispatchSolution {
        problem: Problem::TieLine,
        generators: generators.clone(),
        pm: vec![0.0; generators.len()],
        beta: vec![0.0; n_areas],
        price_index: generators.iter().map(|&j| owner[j]).collect(),
        lambda_bar: vec![0.0; generators.len()],
        mu_bar: vec![0.0; generators.len()],
        targets: targets.clone(),
    };
    for k in 0..n_areas {
        let members: Vec<usize> = (0..generators.len()).filter(|&g| owner[generators[g]] == k).collect();
        if members.is_empty() {
            if targets[k].abs() > 1e-12 {
                return Err(OptError::AreaInfeasible { area: k, target: targets[k] });
            }
            continue;
        }
        let area_gens: Vec<&GeneratorParams> = members.iter().map(|&g| gens[g]).collect();
        let group = dispatch_group(&units(&area_gens, false), targets[k])?;
        for (i, &g) in members.iter().enumerate() {
            sol.pm[g] = group.pm[i];
        }
        sol.beta[k] = group.beta;
    }
    Ok(sol)
}

/// Largest violation of the optimality conditions: stationarity, supply
/// balance of every price group, bounds, multiplier signs and complementarity.
pub fn kkt_residual(model: &NetworkModel, sol: &DispatchSolution) -> f64 {
    let mut r: f64 = 0.0;
    let mut supply = vec![0.0; sol.targets.len()];
    for (g, &j) in sol.generators.iter().enumerate() {
        let gen = model.buses[j].generator.as_ref().expect("generator");
        let p = sol.pm[g];
        let (lam, mu) = (sol.lambda_bar[g], sol.mu_bar[g]);
        r = r.max((gen.cost.gradient(p) - lam + mu - sol.price(g)).abs());
        r = r.max(-lam).max(-mu);
        if sol.problem == Problem::Bounded {
            if let Some(lo) = gen.pm_min {
                r = r.max(lo - p).max((lam * (p - lo)).abs());
            }
            if let Some(hi) = gen.pm_max {
                r = r.max(p - hi).max((mu * (hi - p)).abs());
            }
        }
        supply[sol.price_index[g]] += p;
    }
    for (s, t) in supply.iter().zip(&sol.targets) {
        r = r.max((s - t).abs());
    }
    r
}

/// Angle differences and flows of a lossless network carrying given bus injections.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlow {
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
    pub flows: Vec<f64>,
}

/// Solves `net outflow = injection` for bus angles by Newton's method, with bus
/// 0 as the angle reference and the linearized solution as the first iterate.
pub fn solve_power_flow(model: &NetworkModel, injection: &[f64]) -> Result<PowerFlow, OptError> {
    let n = model.n_buses();
    let lines = &model.phys_lines;
    let mismatch = |theta: &[f64]| {
        let mut f: Vec<f64> = injection.iter().map(|p| -p).collect();
        for l in lines {
            let p = l.weight * (theta[l.from] - theta[l.to]).sin();
            f[l.from] += p;
            f[l.to] -= p;
        }
        f
    };
    let mut theta = vec![0.0; n];
    let scale = injection.iter().fold(1.0_f64, |m, p| m.max(p.abs()));
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let f = mismatch(&theta);
        worst = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if worst < 1e-14 * scale {
            break;
        }
        if n <= 1 {
            break;
        }
        let mut jac = DMatrix::zeros(n - 1, n - 1);
        for l in lines {
            let w = l.weight * (theta[l.from] - theta[l.to]).cos();
            let (a, b) = (l.from, l.to);
            for (r, c, v) in [(a, a, w), (a, b, -w), (b, a, -w), (b, b, w)] {
                if r > 0 && c > 0 {
                    jac[(r - 1, c - 1)] += v;
                }
            }
        }
        let rhs = DVector::from_iterator(n - 1, f[1..].iter().map(|v| -v));
        let step = jac.lu().solve(&rhs).ok_or(OptError::PowerFlow { mismatch: worst })?;
        for j in 1..n {
            theta[j] += step[j - 1];
        }
    }
    if !(worst < 1e-12 * scale) {
        return Err(OptError::PowerFlow { mismatch: worst });
    }
    let eta: Vec<f64> = lines.iter().map(|l| theta[l.from] - theta[l.to]).collect();
    let flows = lines.iter().zip(&eta).map(|(l, e)| l.weight * e.sin()).collect();
    if eta.iter().any(|e| e.abs() >= std::f64::consts::FRAC_PI_2) {
        log::warn!("power flow solution has an angle difference beyond pi/2");
    }
    Ok(PowerFlow { theta, eta, flows })
}

/// Bus injections `pm - demand` for a dispatch.
pub fn injections(model: &NetworkModel, sol: &DispatchSolution) -> Vec<f64> {
    let mut p: Vec<f64> = model.buses.iter().map(|b| -b.demand).collect();
    for (g, &j) in sol.generators.iter().enumerate() {
        p[j] += sol.pm[g];
    }
    p
}
