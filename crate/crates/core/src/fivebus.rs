//! The five-bus reference network: three generators, two loads, two control areas.
//!
//! Bus parameters are the standard benchmark values. Line susceptances, the
//! communication links and the area split are this crate's choice; the bundled
//! `scenarios/fivebus_table2.toml` carries the same data.

use crate::network::{Area, BusParams, GeneratorParams, Line, NetworkModel};

pub const INERTIA: [f64; 3] = [13.0, 12.1, 14.3];
pub const TAU: [f64; 3] = [0.3, 0.4, 0.35];
pub const COST_Q: [f64; 3] = [2.4, 4.0, 3.4];
pub const COST_C: [f64; 3] = [0.3, 0.1, 0.2];
pub const DAMPING: [f64; 5] = [1.0, 0.8, 1.1, 1.0, 0.9];
pub const DEMAND: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Scheduled net import of the two areas.
pub const SCHEDULE: [f64; 2] = [-0.5, 0.5];
/// Time of the load step.
pub const LOAD_STEP_AT: f64 = 5.0;

/// Physical lines as (bus, bus, susceptance), zero-based.
pub const PHYS_LINES: [(usize, usize, f64); 6] =
    [(0, 1, 2.0), (0, 3, 2.0), (1, 2, 1.5), (1, 3, 1.5), (2, 4, 2.0), (3, 4, 1.5)];

/// Communication links as (bus, bus, weight), zero-based.
pub const COMM_LINES: [(usize, usize, f64); 5] = [(0, 1, 1.0), (0, 3, 1.0), (1, 2, 1.0), (2, 4, 1.0), (3, 4, 1.0)];

pub fn model() -> NetworkModel {
    let mut buses = Vec::new();
    for j in 0..5 {
        let generator = (j < 3).then(|| GeneratorParams::quadratic(INERTIA[j], TAU[j], COST_Q[j], COST_C[j]));
        buses.push(BusParams { label: (j + 1).to_string(), damping: DAMPING[j], demand: DEMAND[j], generator });
    }
    NetworkModel {
        buses,
        phys_lines: PHYS_LINES.iter().map(|&(a, b, y)| Line::new(a, b, y)).collect(),
        comm_lines: COMM_LINES.iter().map(|&(a, b, w)| Line::new(a, b, w)).collect(),
        areas: vec![
            Area { buses: vec![0, 1, 3], informed_bus: 1, schedule: SCHEDULE[0] },
            Area { buses: vec![2, 4], informed_bus: 2, schedule: SCHEDULE[1] },
        ],
    }
}

/// The reference model with an upper generation limit on one generator bus.
pub fn model_with_cap(bus: usize, cap: f64) -> NetworkModel {
    let mut m = model();
    m.buses[bus].generator.as_mut().expect("generator bus").pm_max = Some(cap);
    m
}
