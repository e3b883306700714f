//! Lossless swing dynamics: generator buses integrate frequency, load buses are
//! algebraic, lines carry `Y sin(eta)`, and generation follows a first-order lag.

use thiserror::Error;

use crate::network::{GeneratorParams, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("load bus {bus} has non-positive damping {damping}")]
    ZeroDamping { bus: usize, damping: f64 },
}

/// Physical state: per-line angle differences, generator frequencies and
/// mechanical powers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub eta: Vec<f64>,
    pub omega_g: Vec<f64>,
    pub pm: Vec<f64>,
}

impl PlantState {
    pub fn flat(topo: &Topology) -> Self {
        Self { eta: vec![0.0; topo.n_phys()], omega_g: vec![0.0; topo.n_gen()], pm: vec![0.0; topo.n_gen()] }
    }
}

/// Exogenous plant inputs: per-generator control input and per-bus demand.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantInput {
    pub u: Vec<f64>,
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantDerivative {
    pub eta: Vec<f64>,
    pub omega_g: Vec<f64>,
    pub pm: Vec<f64>,
}

/// Algebraic quantities of the network at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSnapshot {
    pub flows: Vec<f64>,
    /// Outflow minus inflow at every bus.
    pub net_outflow: Vec<f64>,
    /// Frequency of every bus; load buses solved from their balance.
    pub omega: Vec<f64>,
}

pub fn line_flows(eta: &[f64], susceptance: &[f64]) -> Vec<f64> {
    eta.iter().zip(susceptance).map(|(&e, &y)| y * e.sin()).collect()
}

pub fn net_outflow(flows: &[f64], phys: &[(usize, usize)], n_buses: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_buses];
    for (&(a, b), &p) in phys.iter().zip(flows) {
        out[a] += p;
        out[b] -= p;
    }
    out
}

/// Frequency at a load bus from its power balance. `damping` must be positive.
pub fn load_bus_frequency(net_outflow: f64, demand: f64, damping: f64) -> f64 {
    (-demand - net_outflow) / damping
}

/// Frequencies at all load buses, in bus order.
pub fn load_bus_frequencies(
    topo: &Topology,
    flows: &[f64],
    demand: &[f64],
    damping: &[f64],
) -> Result<Vec<f64>, PlantError> {
    let out = net_outflow(flows, &topo.phys, topo.n_buses);
    (0..topo.n_buses)
        .filter(|&j| topo.gen_of_bus[j].is_none())
        .map(|j| {
            if damping[j] > 0.0 {
                Ok(load_bus_frequency(out[j], demand[j], damping[j]))
            } else {
                Err(PlantError::ZeroDamping { bus: j, damping: damping[j] })
            }
        })
        .collect()
}

/// Flows, net outflows and the full frequency vector.
pub fn snapshot(topo: &Topology, damping: &[f64], eta: &[f64], omega_g: &[f64], demand: &[f64]) -> NetworkSnapshot {
    let flows = line_flows(eta, &topo.susceptance);
    let net_outflow = net_outflow(&flows, &topo.phys, topo.n_buses);
    let omega = (0..topo.n_buses)
        .map(|j| match topo.gen_of_bus[j] {
            Some(g) => omega_g[g],
            None => load_bus_frequency(net_outflow[j], demand[j], damping[j]),
        })
        .collect();
    NetworkSnapshot { flows, net_outflow, omega }
}

/// Time derivatives of the plant for given inputs.
pub fn plant_derivatives(
    topo: &Topology,
    gens: &[&GeneratorParams],
    damping: &[f64],
    state: &PlantState,
    input: &PlantInput,
) -> PlantDerivative {
    let snap = snapshot(topo, damping, &state.eta, &state.omega_g, &input.demand);
    let eta = topo.phys.iter().map(|&(a, b)| snap.omega[a] - snap.omega[b]).collect();
    let mut omega_g = Vec::with_capacity(topo.n_gen());
    let mut pm = Vec::with_capacity(topo.n_gen());
    for (g, &j) in topo.generators.iter().enumerate() {
        let gp = gens[g];
        omega_g.push(
            (-input.demand[j] + state.pm[g] - damping[j] * snap.omega[j] - snap.net_outflow[j]) / gp.inertia,
        );
        pm.push((-state.pm[g] + gp.k_g * input.u[g]) / gp.tau);
    }
    PlantDerivative { eta, omega_g, pm }
}

/// Generation input that makes the generator follow the power command.
pub fn generation_input(p_c: f64, omega: f64, pm: f64, gen: &GeneratorParams) -> f64 {
    gen.k_c * (p_c - omega) + pm / gen.k_g - gen.k_c * gen.cost.gradient(pm)
}

/// Generation input with the squared multipliers of the generation bounds.
pub fn generation_input_bounded(p_c: f64, omega: f64, pm: f64, lambda: f64, mu: f64, gen: &GeneratorParams) -> f64 {
    gen.k_c * (p_c - omega) + pm / gen.k_g - gen.k_c * (gen.cost.gradient(pm) - lambda * lambda + mu * mu)
}

/// Largest violation of the plant equilibrium equations with `p_c` held fixed:
/// equal frequencies across lines, generator and load balances, and `pm = k_g u`.
pub fn equilibrium_residual(
    topo: &Topology,
    gens: &[&GeneratorParams],
    damping: &[f64],
    state: &PlantState,
    omega_loads: &[f64],
    p_c: &[f64],
    demand: &[f64],
) -> f64 {
    let flows = line_flows(&state.eta, &topo.susceptance);
    let out = net_outflow(&flows, &topo.phys, topo.n_buses);
    let mut omega = vec![0.0; topo.n_buses];
    let mut loads = omega_loads.iter();
    for j in 0..topo.n_buses {
        omega[j] = match topo.gen_of_bus[j] {
            Some(g) => state.omega_g[g],
            None => *loads.next().expect("one frequency per load bus"),
        };
    }
    let mut r: f64 = 0.0;
    for &(a, b) in &topo.phys {
        r = r.max((omega[a] - omega[b]).abs());
    }
    for j in 0..topo.n_buses {
        let pm = topo.gen_of_bus[j].map_or(0.0, |g| state.pm[g]);
        r = r.max((-demand[j] + pm - damping[j] * omega[j] - out[j]).abs());
    }
    for (g, &j) in topo.generators.iter().enumerate() {
        let u = generation_input(p_c[j], omega[j], state.pm[g], gens[g]);
        r = r.max((state.pm[g] - gens[g].k_g * u).abs());
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn flows_follow_sine() {
        assert_eq!(line_flows(&[0.0], &[3.0]), vec![0.0]);
        assert!((line_flows(&[PI / 6.0], &[1.0])[0] - 0.5).abs() < 1e-15);
        assert!((line_flows(&[-PI / 2.0], &[2.0])[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn load_frequency_from_balance() {
        assert_eq!(load_bus_frequency(0.0, 0.0, 1.0), 0.0);
        assert_eq!(load_bus_frequency(-0.4, 0.4, 1.0), 0.0);
        assert!((load_bus_frequency(0.0, 0.5, 0.9) + 0.5 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn generation_input_cases() {
        let g = GeneratorParams::quadratic(13.0, 0.3, 2.4, 0.3);
        assert!((generation_input(1.0, 0.0, 0.0, &g) - 1.72).abs() < 1e-12);
        let pm = 0.69;
        let pc = g.cost.gradient(pm);
        assert!((generation_input(pc, 0.0, pm, &g) - pm / g.k_g).abs() < 1e-15);
        let shifted = generation_input(pc, 0.01, pm, &g);
        assert!((generation_input(pc, 0.0, pm, &g) - shifted - g.k_c * 0.01).abs() < 1e-15);
        assert_eq!(generation_input_bounded(1.0, 0.0, 0.2, 0.0, 0.0, &g), generation_input(1.0, 0.0, 0.2, &g));
        assert!(
            (generation_input_bounded(1.0, 0.0, 0.2, 1.0, 0.0, &g) - generation_input(1.0, 0.0, 0.2, &g) - 1.0).abs()
                < 1e-15
        );
        assert!(
            (generation_input_bounded(1.0, 0.0, 0.2, 0.7, 0.7, &g) - generation_input(1.0, 0.0, 0.2, &g)).abs()
                < 1e-15
        );
    }
}
