//! Network topology, bus parameters and the graph matrices derived from them.
//!
//! Buses are addressed by their position in [`NetworkModel::buses`]. Every
//! undirected line is stored once, oriented from the lower to the higher index.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::cost::{CostFunction, QuadraticCost};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("edge {edge} references bus {bus}, but the network has {n_nodes} buses")]
    NodeOutOfRange { edge: usize, bus: usize, n_nodes: usize },
    #[error("edge {edge} is a self-loop at bus {bus}")]
    SelfLoop { edge: usize, bus: usize },
    #[error("non-positive weight {weight} on edge {from}-{to}")]
    NonPositiveWeight { from: usize, to: usize, weight: f64 },
    #[error("informed bus {bus} is not inside area {area}")]
    InformedOutsideArea { area: usize, bus: usize },
    #[error("bus {bus} belongs to no area")]
    Unassigned { bus: usize },
    #[error("bus {bus} belongs to more than one area")]
    Overlap { bus: usize },
    #[error("no area partition configured")]
    NoAreas,
}

/// Generator-only parameters.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    /// Inertia M.
    pub inertia: f64,
    /// Generation time constant.
    pub tau: f64,
    pub k_g: f64,
    pub k_c: f64,
    pub cost: Arc<dyn CostFunction>,
    pub pm_min: Option<f64>,
    pub pm_max: Option<f64>,
}

impl GeneratorParams {
    pub fn quadratic(inertia: f64, tau: f64, q: f64, c: f64) -> Self {
        Self {
            inertia,
            tau,
            k_g: 1.0,
            k_c: 1.0,
            cost: Arc::new(QuadraticCost::new(q, c)),
            pm_min: None,
            pm_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone)]
pub struct BusParams {
    /// Label used in configs and output column names.
    pub label: String,
    /// Damping Λ.
    pub damping: f64,
    /// Uncontrollable demand pL.
    pub demand: f64,
    pub generator: Option<GeneratorParams>,
}

impl BusParams {
    pub fn kind(&self) -> BusKind {
        if self.generator.is_some() {
            BusKind::Generator
        } else {
            BusKind::Load
        }
    }
}

/// An undirected line. `weight` is the susceptance Y for physical lines and the
/// communication weight α for communication links.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

impl Line {
    pub fn new(a: usize, b: usize, weight: f64) -> Self {
        Self { from: a.min(b), to: a.max(b), weight }
    }
}

/// A control area with its scheduled net power import and the one bus that knows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub buses: Vec<usize>,
    pub informed_bus: usize,
    pub schedule: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NetworkModel {
    pub buses: Vec<BusParams>,
    pub phys_lines: Vec<Line>,
    pub comm_lines: Vec<Line>,
    pub areas: Vec<Area>,
}

impl NetworkModel {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Bus indices of the generators, in bus order.
    pub fn generators(&self) -> Vec<usize> {
        (0..self.buses.len()).filter(|&j| self.buses[j].generator.is_some()).collect()
    }

    pub fn demand(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.demand).collect()
    }

    pub fn with_demand(&self, demand: &[f64]) -> Self {
        let mut m = self.clone();
        for (b, &d) in m.buses.iter_mut().zip(demand) {
            b.demand = d;
        }
        m
    }

    pub fn phys_pairs(&self) -> Vec<(usize, usize)> {
        self.phys_lines.iter().map(|l| (l.from, l.to)).collect()
    }

    pub fn comm_pairs(&self) -> Vec<(usize, usize)> {
        self.comm_lines.iter().map(|l| (l.from, l.to)).collect()
    }

    /// Area index of every bus.
    pub fn area_of_bus(&self) -> Result<Vec<usize>, NetworkError> {
        if self.areas.is_empty() {
            return Err(NetworkError::NoAreas);
        }
        let mut owner = vec![None; self.n_buses()];
        for (k, area) in self.areas.iter().enumerate() {
            for &j in &area.buses {
                if j >= owner.len() {
                    return Err(NetworkError::NodeOutOfRange { edge: k, bus: j, n_nodes: owner.len() });
                }
                if owner[j].is_some() {
                    return Err(NetworkError::Overlap { bus: j });
                }
                owner[j] = Some(k);
            }
        }
        owner
            .into_iter()
            .enumerate()
            .map(|(j, o)| o.ok_or(NetworkError::Unassigned { bus: j }))
            .collect()
    }
}

/// Directed incidence matrix: -1 where an edge leaves a node, +1 where it enters.
pub fn incidence_matrix(edges: &[(usize, usize)], n_nodes: usize) -> Result<DMatrix<f64>, NetworkError> {
    let mut d = DMatrix::zeros(n_nodes, edges.len());
    for (e, &(from, to)) in edges.iter().enumerate() {
        for bus in [from, to] {
            if bus >= n_nodes {
                return Err(NetworkError::NodeOutOfRange { edge: e, bus, n_nodes });
            }
        }
        if from == to {
            return Err(NetworkError::SelfLoop { edge: e, bus: from });
        }
        d[(from, e)] = -1.0;
        d[(to, e)] = 1.0;
    }
    Ok(d)
}

/// Weighted Laplacian D W Dᵀ of a set of communication links.
pub fn laplacian(lines: &[Line], n_nodes: usize) -> Result<DMatrix<f64>, NetworkError> {
    let mut l = DMatrix::zeros(n_nodes, n_nodes);
    for (e, line) in lines.iter().enumerate() {
        for bus in [line.from, line.to] {
            if bus >= n_nodes {
                return Err(NetworkError::NodeOutOfRange { edge: e, bus, n_nodes });
            }
        }
        if line.from == line.to {
            return Err(NetworkError::SelfLoop { edge: e, bus: line.from });
        }
        if !(line.weight > 0.0) {
            return Err(NetworkError::NonPositiveWeight { from: line.from, to: line.to, weight: line.weight });
        }
        let (i, j, a) = (line.from, line.to, line.weight);
        l[(i, i)] += a;
        l[(j, j)] += a;
        l[(i, j)] -= a;
        l[(j, i)] -= a;
    }
    Ok(l)
}

/// Matrices describing the area partition.
#[derive(Debug, Clone)]
pub struct AreaMatrices {
    /// |K| x N area indicator.
    pub indicator: DMatrix<f64>,
    /// |K| x |E| tie-line incidence, `indicator * D`.
    pub tie_incidence: DMatrix<f64>,
    /// N x |K| matrix with a single 1 per column at the informed bus.
    pub knowledge: DMatrix<f64>,
    /// Laplacian of the communication links internal to an area.
    pub intra_laplacian: DMatrix<f64>,
}

pub fn area_matrices(model: &NetworkModel) -> Result<AreaMatrices, NetworkError> {
    let n = model.n_buses();
    let owner = model.area_of_bus()?;
    let k = model.areas.len();
    let mut indicator = DMatrix::zeros(k, n);
    for (j, &a) in owner.iter().enumerate() {
        indicator[(a, j)] = 1.0;
    }
    let mut knowledge = DMatrix::zeros(n, k);
    for (a, area) in model.areas.iter().enumerate() {
        if area.informed_bus >= n || owner[area.informed_bus] != a {
            return Err(NetworkError::InformedOutsideArea { area: a, bus: area.informed_bus });
        }
        knowledge[(area.informed_bus, a)] = 1.0;
    }
    let d = incidence_matrix(&model.phys_pairs(), n)?;
    let tie_incidence = &indicator * d;
    let intra: Vec<Line> = model
        .comm_lines
        .iter()
        .filter(|l| owner[l.from] == owner[l.to])
        .copied()
        .collect();
    let intra_laplacian = laplacian(&intra, n)?;
    Ok(AreaMatrices { indicator, tie_incidence, knowledge, intra_laplacian })
}

/// Tie-line incidence built from boundary membership alone: -1 for the area
/// holding the tail of a boundary line, +1 for the area holding its head.
pub fn tie_incidence_from_boundaries(model: &NetworkModel) -> Result<DMatrix<f64>, NetworkError> {
    let owner = model.area_of_bus()?;
    let mut m = DMatrix::zeros(model.areas.len(), model.phys_lines.len());
    for (e, l) in model.phys_lines.iter().enumerate() {
        if owner[l.from] != owner[l.to] {
            m[(owner[l.from], e)] = -1.0;
            m[(owner[l.to], e)] = 1.0;
        }
    }
    Ok(m)
}

/// One broken model invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub element: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.element)
    }
}

fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>, nodes: &[usize]) -> bool {
    if nodes.len() <= 1 {
        return true;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, nodes[0]);
    nodes.iter().all(|&j| find(&mut parent, j) == root)
}

/// Checks every parameter and topology invariant. An empty list means the model
/// is usable.
pub fn validate(model: &NetworkModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = model.n_buses();
    let mut push = |invariant, element: String| out.push(Violation { invariant, element });
    if n == 0 {
        push("at least one bus", "buses".into());
        return out;
    }
    for b in &model.buses {
        let name = format!("bus {}", b.label);
        if !(b.damping > 0.0) {
            push("damping must be positive", name.clone());
        }
        if !b.demand.is_finite() {
            push("demand must be finite", name.clone());
        }
        if let Some(g) = &b.generator {
            for (v, what) in [
                (g.inertia, "inertia must be positive"),
                (g.tau, "generation time constant must be positive"),
                (g.k_g, "generation gain must be positive"),
                (g.k_c, "controller gain must be positive"),
            ] {
                if !(v > 0.0) {
                    push(what, name.clone());
                }
            }
            if let Some(qc) = g.cost.as_quadratic() {
                if !(qc.q > 0.0) {
                    push("cost curvature must be positive", name.clone());
                }
            }
            if let (Some(lo), Some(hi)) = (g.pm_min, g.pm_max) {
                if lo > hi {
                    push("lower generation bound exceeds upper bound", name.clone());
                }
            }
        }
    }
    if model.generators().is_empty() {
        push("at least one generator", "buses".into());
    }
    let check_lines = |lines: &[Line], kind: &'static str, out: &mut Vec<Violation>| {
        let mut seen = std::collections::HashSet::new();
        for l in lines {
            let name = format!("{kind} line {}-{}", l.from, l.to);
            if l.from >= n || l.to >= n {
                out.push(Violation { invariant: "line endpoint out of range", element: name });
                continue;
            }
            if l.from == l.to {
                out.push(Violation { invariant: "self-loop", element: name.clone() });
            }
            if !(l.weight > 0.0) {
                out.push(Violation { invariant: "line weight must be positive", element: name.clone() });
            }
            if !seen.insert((l.from.min(l.to), l.from.max(l.to))) {
                out.push(Violation { invariant: "duplicate line", element: name });
            }
        }
    };
    check_lines(&model.phys_lines, "physical", &mut out);
    check_lines(&model.comm_lines, "communication", &mut out);
    if !out.is_empty() {
        return out;
    }
    let all: Vec<usize> = (0..n).collect();
    if !connected(n, model.phys_pairs().into_iter(), &all) {
        out.push(Violation { invariant: "physical graph must be connected", element: "phys_lines".into() });
    }
    if !connected(n, model.comm_pairs().into_iter(), &all) {
        out.push(Violation {
            invariant: "communication graph must be connected",
            element: "comm_lines".into(),
        });
    }
    if !model.areas.is_empty() {
        match model.area_of_bus() {
            Err(e) => out.push(Violation { invariant: "areas must partition the buses", element: e.to_string() }),
            Ok(owner) => {
                for (k, area) in model.areas.iter().enumerate() {
                    if area.informed_bus >= n || owner[area.informed_bus] != k {
                        out.push(Violation {
                            invariant: "informed bus must lie inside its area",
                            element: format!("area {}", k + 1),
                        });
                    }
                    if !area.schedule.is_finite() {
                        out.push(Violation { invariant: "schedule must be finite", element: format!("area {}", k + 1) });
                    }
                    let intra = model
                        .comm_lines
                        .iter()
                        .filter(|l| owner[l.from] == k && owner[l.to] == k)
                        .map(|l| (l.from, l.to));
                    if !connected(n, intra, &area.buses) {
                        out.push(Violation {
                            invariant: "intra-area communication graph must be connected",
                            element: format!("area {}", k + 1),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Which endpoint of a canonically oriented line a bus sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    /// The lower-index endpoint, where the line leaves.
    Tail,
    /// The higher-index endpoint, where the line enters.
    Head,
}

/// A communication neighbour seen from one bus.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor {
    pub link: usize,
    pub bus: usize,
    pub alpha: f64,
    pub end: End,
    pub same_area: bool,
}

/// Index structures used inside the integration loop.
#[derive(Debug, Clone)]
pub struct Topology {
    pub n_buses: usize,
    pub generators: Vec<usize>,
    pub gen_of_bus: Vec<Option<usize>>,
    pub phys: Vec<(usize, usize)>,
    pub susceptance: Vec<f64>,
    pub comm: Vec<Line>,
    pub comm_same_area: Vec<bool>,
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Area of every bus; all zero when no partition is configured.
    pub area_of_bus: Vec<usize>,
    pub n_areas: usize,
    /// Scheduled import of the area, at its informed bus only.
    pub informed_schedule: Vec<f64>,
}

impl Topology {
    pub fn new(model: &NetworkModel) -> Result<Self, NetworkError> {
        let n = model.n_buses();
        incidence_matrix(&model.phys_pairs(), n)?;
        laplacian(&model.comm_lines, n)?;
        let generators = model.generators();
        let mut gen_of_bus = vec![None; n];
        for (g, &j) in generators.iter().enumerate() {
            gen_of_bus[j] = Some(g);
        }
        let (area_of_bus, n_areas) = if model.areas.is_empty() {
            (vec![0; n], 1)
        } else {
            (model.area_of_bus()?, model.areas.len())
        };
        let mut informed_schedule = vec![0.0; n];
        for (k, area) in model.areas.iter().enumerate() {
            if area.informed_bus >= n || area_of_bus[area.informed_bus] != k {
                return Err(NetworkError::InformedOutsideArea { area: k, bus: area.informed_bus });
            }
            informed_schedule[area.informed_bus] += area.schedule;
        }
        let comm_same_area: Vec<bool> =
            model.comm_lines.iter().map(|l| area_of_bus[l.from] == area_of_bus[l.to]).collect();
        let mut neighbors = vec![Vec::new(); n];
        for (e, l) in model.comm_lines.iter().enumerate() {
            let same_area = comm_same_area[e];
            neighbors[l.from].push(Neighbor { link: e, bus: l.to, alpha: l.weight, end: End::Tail, same_area });
            neighbors[l.to].push(Neighbor { link: e, bus: l.from, alpha: l.weight, end: End::Head, same_area });
        }
        Ok(Self {
            n_buses: n,
            generators,
            gen_of_bus,
            phys: model.phys_pairs(),
            susceptance: model.phys_lines.iter().map(|l| l.weight).collect(),
            comm: model.comm_lines.clone(),
            comm_same_area,
            neighbors,
            area_of_bus,
            n_areas,
            informed_schedule,
        })
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_phys(&self) -> usize {
        self.phys.len()
    }

    pub fn n_comm(&self) -> usize {
        self.comm.len()
    }

    /// Net import of every area, i.e. `indicator * D * flows`.
    pub fn area_flows(&self, flows: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_areas];
        for (e, &(a, b)) in self.phys.iter().enumerate() {
            let (ka, kb) = (self.area_of_bus[a], self.area_of_bus[b]);
            if ka != kb {
                out[ka] -= flows[e];
                out[kb] += flows[e];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Vec<Line> {
        vec![Line::new(0, 1, 1.0), Line::new(1, 2, 1.0)]
    }

    #[test]
    fn single_edge_incidence() {
        let d = incidence_matrix(&[(0, 1)], 2).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]));
    }

    #[test]
    fn empty_incidence_has_no_columns() {
        let d = incidence_matrix(&[], 3).unwrap();
        assert_eq!(d.shape(), (3, 0));
    }

    #[test]
    fn incidence_rejects_out_of_range() {
        assert!(matches!(incidence_matrix(&[(0, 3)], 3), Err(NetworkError::NodeOutOfRange { bus: 3, .. })));
    }

    #[test]
    fn laplacian_of_one_edge() {
        let l = laplacian(&[Line::new(0, 1, 1.0)], 2).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn laplacian_of_path() {
        let l = laplacian(&path3(), 3).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, expected);
    }

    #[test]
    fn laplacian_rejects_nonpositive_weight() {
        let err = laplacian(&[Line::new(0, 1, 0.0)], 2).unwrap_err();
        assert!(matches!(err, NetworkError::NonPositiveWeight { .. }));
    }

    #[test]
    fn two_single_bus_areas() {
        let bus = |g| BusParams {
            label: "x".into(),
            damping: 1.0,
            demand: 0.0,
            generator: if g { Some(GeneratorParams::quadratic(1.0, 1.0, 1.0, 0.0)) } else { None },
        };
        let model = NetworkModel {
            buses: vec![bus(true), bus(true)],
            phys_lines: vec![Line::new(0, 1, 1.0)],
            comm_lines: vec![Line::new(0, 1, 1.0)],
            areas: vec![
                Area { buses: vec![0], informed_bus: 0, schedule: 0.1 },
                Area { buses: vec![1], informed_bus: 1, schedule: -0.1 },
            ],
        };
        let am = area_matrices(&model).unwrap();
        assert_eq!(am.tie_incidence, DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]));
        assert_eq!(am.intra_laplacian, DMatrix::zeros(2, 2));
    }
}
