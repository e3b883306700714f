//! Controller dynamics on the communication graph.
//!
//! Every controller is a pure derivative evaluator. It sees its own state, the
//! local power imbalance `pm - demand` (or `pm - chi` with the demand observer)
//! and, per link end, whatever arrived over the channel: raw delayed neighbour
//! values for the direct schemes, decoded wave variables for the scattering
//! schemes. Delay handling lives in [`crate::channel`].

use crate::network::{End, Topology};

/// Controller families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    /// Edge-based primal-dual law with one integrator copy per link end.
    Naive,
    /// Node-based law integrating neighbour power commands into `xi`.
    /// Loses optimality under delay.
    Xi,
    /// Node-based law exchanging power commands and `zeta` directly.
    Reform,
    /// Node-based law with feedforward compensators and wave-variable channels.
    Scatter,
    /// Tie-line law exchanging values directly.
    TieLine,
    /// Tie-line law with compensators and six-slot wave-variable channels.
    TieLineScatter,
}

/// One block of controller state, sized per bus or per communication link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Field {
    pub name: &'static str,
    pub per_link: bool,
}

const fn bus(name: &'static str) -> Field {
    Field { name, per_link: false }
}

const NAIVE_FIELDS: [Field; 3] = [
    Field { name: "psi_tail", per_link: true },
    Field { name: "psi_head", per_link: true },
    bus("pc"),
];
const XI_FIELDS: [Field; 2] = [bus("xi"), bus("pc")];
const REFORM_FIELDS: [Field; 2] = [bus("zeta"), bus("pc")];
const SCATTER_FIELDS: [Field; 4] = [bus("rho_zeta"), bus("zeta"), bus("rho_p"), bus("pc")];
const TIELINE_FIELDS: [Field; 4] = [bus("zeta"), bus("pc"), bus("pi"), bus("phi")];
const TIELINE_SCATTER_FIELDS: [Field; 8] = [
    bus("rho_zeta"),
    bus("zeta"),
    bus("rho_p"),
    bus("pc"),
    bus("rho_pi"),
    bus("pi"),
    bus("rho_phi"),
    bus("phi"),
];

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Naive,
        ControllerKind::Xi,
        ControllerKind::Reform,
        ControllerKind::Scatter,
        ControllerKind::TieLine,
        ControllerKind::TieLineScatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Naive => "naive",
            ControllerKind::Xi => "xi",
            ControllerKind::Reform => "reform",
            ControllerKind::Scatter => "scatter",
            ControllerKind::TieLine => "tieline",
            ControllerKind::TieLineScatter => "tieline_scatter",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn fields(self) -> &'static [Field] {
        match self {
            ControllerKind::Naive => &NAIVE_FIELDS,
            ControllerKind::Xi => &XI_FIELDS,
            ControllerKind::Reform => &REFORM_FIELDS,
            ControllerKind::Scatter => &SCATTER_FIELDS,
            ControllerKind::TieLine => &TIELINE_FIELDS,
            ControllerKind::TieLineScatter => &TIELINE_SCATTER_FIELDS,
        }
    }

    pub fn uses_scattering(self) -> bool {
        matches!(self, ControllerKind::Scatter | ControllerKind::TieLineScatter)
    }

    pub fn is_tieline(self) -> bool {
        matches!(self, ControllerKind::TieLine | ControllerKind::TieLineScatter)
    }

    /// Slots per wave-variable frame.
    pub fn frame_width(self) -> usize {
        if self == ControllerKind::TieLineScatter {
            6
        } else {
            2
        }
    }

    pub fn field_index(self, name: &str) -> Option<usize> {
        self.fields().iter().position(|f| f.name == name)
    }

    /// Offset and length of a field inside the controller block.
    pub fn field_range(self, topo: &Topology, index: usize) -> std::ops::Range<usize> {
        let size = |f: &Field| if f.per_link { topo.n_comm() } else { topo.n_buses };
        let start: usize = self.fields()[..index].iter().map(size).sum();
        start..start + size(&self.fields()[index])
    }

    pub fn state_len(self, topo: &Topology) -> usize {
        self.field_range(topo, self.fields().len() - 1).end
    }

    pub fn pc_range(self, topo: &Topology) -> std::ops::Range<usize> {
        self.field_range(topo, self.field_index("pc").expect("every controller has a power command"))
    }
}

/// Controller selection plus the optional generation-bound and observer extensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Enforce generation bounds through multiplier dynamics.
    pub bounds: bool,
    /// Replace measured demand by the observer estimate.
    pub observer: bool,
    /// Observer time constant.
    pub observer_tau: f64,
    /// Initial value of every bound multiplier.
    pub multiplier_init: f64,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind) -> Self {
        Self { kind, bounds: false, observer: false, observer_tau: 0.1, multiplier_init: 1.0 }
    }
}

/// Slots of a raw (direct) transmission.
pub const RAW_PC: usize = 0;
pub const RAW_ZETA: usize = 1;
pub const RAW_PI: usize = 2;
pub const RAW_PHI: usize = 3;

/// Slots of a decoded wave-variable frame.
pub const R_P: usize = 0;
pub const R_ZETA: usize = 1;
pub const R_ZETA2: usize = 2;
pub const R_PI: usize = 3;
pub const R_PI2: usize = 4;
pub const R_PHI2: usize = 5;

/// What each end of every communication link currently holds about the other end.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub at_tail: Vec<[f64; 6]>,
    pub at_head: Vec<[f64; 6]>,
}

impl Received {
    pub fn zeros(n_links: usize) -> Self {
        Self { at_tail: vec![[0.0; 6]; n_links], at_head: vec![[0.0; 6]; n_links] }
    }

    pub fn get(&self, link: usize, end: End) -> &[f64; 6] {
        match end {
            End::Tail => &self.at_tail[link],
            End::Head => &self.at_head[link],
        }
    }

    pub fn get_mut(&mut self, link: usize, end: End) -> &mut [f64; 6] {
        match end {
            End::Tail => &mut self.at_tail[link],
            End::Head => &mut self.at_head[link],
        }
    }
}

fn split<'a, const K: usize>(x: &'a [f64], n: usize) -> [&'a [f64]; K] {
    let mut it = x.chunks_exact(n);
    std::array::from_fn(|_| it.next().expect("controller block too short"))
}

fn split_mut<'a, const K: usize>(x: &'a mut [f64], n: usize) -> [&'a mut [f64]; K] {
    let mut it = x.chunks_exact_mut(n);
    std::array::from_fn(|_| it.next().expect("controller block too short"))
}

/// Values a bus transmits on the direct schemes: power command, zeta, pi, phi.
pub fn raw_broadcast(kind: ControllerKind, topo: &Topology, x: &[f64], j: usize) -> [f64; 4] {
    let get = |name| kind.field_index(name).map_or(0.0, |f| x[kind.field_range(topo, f)][j]);
    [get("pc"), get("zeta"), get("pi"), get("phi")]
}

/// Output `y` of bus `j` on a link: `(zeta, -pc)` for the base scheme and
/// `(zeta, -pc, pi, -zeta, s phi, -s pi)` for the tie-line scheme, with `s`
/// zero on links that cross areas.
pub fn wave_output(kind: ControllerKind, topo: &Topology, x: &[f64], j: usize, same_area: bool) -> [f64; 6] {
    let n = topo.n_buses;
    match kind {
        ControllerKind::Scatter => {
            let [_, zeta, _, pc] = split::<4>(x, n);
            [zeta[j], -pc[j], 0.0, 0.0, 0.0, 0.0]
        }
        ControllerKind::TieLineScatter => {
            let [_, zeta, _, pc, _, pi, _, phi] = split::<8>(x, n);
            let s = if same_area { 1.0 } else { 0.0 };
            [zeta[j], -pc[j], pi[j], -zeta[j], s * phi[j], -s * pi[j]]
        }
        _ => panic!("{} does not use wave variables", kind.name()),
    }
}

/// Edge-based law. Each link end integrates its own copy of the edge state from
/// the delayed neighbour command, and each bus sums only its own copies.
pub fn naive_derivatives(topo: &Topology, x: &[f64], recv: &Received, imbalance: &[f64], dx: &mut [f64]) {
    let (m, n) = (topo.n_comm(), topo.n_buses);
    let (psi, pc) = x.split_at(2 * m);
    let (psi_tail, psi_head) = psi.split_at(m);
    let (dpsi, dpc) = dx.split_at_mut(2 * m);
    let (dpsi_tail, dpsi_head) = dpsi.split_at_mut(m);
    for (e, l) in topo.comm.iter().enumerate() {
        dpsi_head[e] = l.weight * (recv.at_head[e][RAW_PC] - pc[l.to]);
        dpsi_tail[e] = l.weight * (pc[l.from] - recv.at_tail[e][RAW_PC]);
    }
    dpc[..n].iter_mut().zip(imbalance).for_each(|(d, im)| *d = -im);
    for (e, l) in topo.comm.iter().enumerate() {
        dpc[l.from] -= psi_tail[e];
        dpc[l.to] += psi_head[e];
    }
}

/// Node-based law accumulating neighbour commands in `xi`.
pub fn xi_derivatives(topo: &Topology, x: &[f64], recv: &Received, imbalance: &[f64], dx: &mut [f64]) {
    let n = topo.n_buses;
    let [xi, pc] = split::<2>(x, n);
    let [dxi, dpc] = split_mut::<2>(dx, n);
    for j in 0..n {
        dxi[j] = topo.neighbors[j].iter().map(|nb| nb.alpha * (recv.get(nb.link, nb.end)[RAW_PC] - pc[j])).sum();
        dpc[j] = -imbalance[j] + xi[j];
    }
}

/// Node-based law exchanging power command and `zeta`.
pub fn reform_derivatives(topo: &Topology, x: &[f64], recv: &Received, imbalance: &[f64], dx: &mut [f64]) {
    let n = topo.n_buses;
    let [zeta, pc] = split::<2>(x, n);
    let [dzeta, dpc] = split_mut::<2>(dx, n);
    for j in 0..n {
        let (mut a, mut b) = (0.0, 0.0);
        for nb in &topo.neighbors[j] {
            let r = recv.get(nb.link, nb.end);
            a += nb.alpha * (r[RAW_PC] - pc[j]);
            b += nb.alpha * (r[RAW_ZETA] - zeta[j]);
        }
        dzeta[j] = a;
        dpc[j] = -imbalance[j] - b;
    }
}

/// Node-based law with parallel feedforward compensators, driven by decoded
/// wave variables.
pub fn scatter_derivatives(topo: &Topology, x: &[f64], recv: &Received, imbalance: &[f64], dx: &mut [f64]) {
    let n = topo.n_buses;
    let [rho_zeta, zeta, rho_p, pc] = split::<4>(x, n);
    let [d_rho_zeta, d_zeta, d_rho_p, d_pc] = split_mut::<4>(dx, n);
    for j in 0..n {
        let (mut a, mut b) = (0.0, 0.0);
        for nb in &topo.neighbors[j] {
            let r = recv.get(nb.link, nb.end);
            a += nb.alpha * (r[R_P] - pc[j]);
            b += nb.alpha * (r[R_ZETA] - zeta[j]);
        }
        let b = -imbalance[j] - b;
        d_rho_zeta[j] = -rho_zeta[j] + a;
        d_zeta[j] = -rho_zeta[j] + 2.0 * a;
        d_rho_p[j] = -rho_p[j] + b;
        d_pc[j] = -rho_p[j] + 2.0 * b;
    }
}

/// Tie-line law with direct transmission. `pi` couples over every link, `phi`
/// only over links inside an area.
pub fn tieline_derivatives(topo: &Topology, x: &[f64], recv: &Received, imbalance: &[f64], dx: &mut [f64]) {
    let n = topo.n_buses;
    let [zeta, pc, pi, phi] = split::<4>(x, n);
    let [d_zeta, d_pc, d_pi, d_phi] = split_mut::<4>(dx, n);
    for j in 0..n {
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for nb in &topo.neighbors[j] {
            let r = recv.get(nb.link, nb.end);
            a += nb.alpha * ((r[RAW_PC] - pc[j]) - (r[RAW_PI] - pi[j]));
            b += nb.alpha * (r[RAW_ZETA] - zeta[j]);
            if nb.same_area {
                c += nb.alpha * (r[RAW_PHI] - phi[j]);
                d += nb.alpha * (r[RAW_PI] - pi[j]);
            }
        }
        d_zeta[j] = a;
        d_pc[j] = -imbalance[j] - b;
        d_pi[j] = b - c - topo.informed_schedule[j];
        d_phi[j] = d;
    }
}

/// Tie-line law with compensators, driven by six-slot decoded frames.
pub fn tieline_scatter_derivatives(
    topo: &Topology,
    x: &[f64],
    recv: &Received,
    imbalance: &[f64],
    dx: &mut [f64],
) {
    let n = topo.n_buses;
    let [rho_zeta, zeta, rho_p, pc, rho_pi, pi, rho_phi, phi] = split::<8>(x, n);
    let [d_rho_zeta, d_zeta, d_rho_p, d_pc, d_rho_pi, d_pi, d_rho_phi, d_phi] = split_mut::<8>(dx, n);
    for j in 0..n {
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for nb in &topo.neighbors[j] {
            let r = recv.get(nb.link, nb.end);
            a += nb.alpha * ((r[R_P] - pc[j]) - (r[R_PI] - pi[j]));
            b += nb.alpha * (r[R_ZETA] - zeta[j]);
            c += nb.alpha * (r[R_ZETA2] - zeta[j]);
            if nb.same_area {
                c -= nb.alpha * (r[R_PHI2] - phi[j]);
                d += nb.alpha * (r[R_PI2] - pi[j]);
            }
        }
        let c = c - topo.informed_schedule[j];
        let b = -imbalance[j] - b;
        d_rho_zeta[j] = -rho_zeta[j] + a;
        d_zeta[j] = -rho_zeta[j] + 2.0 * a;
        d_rho_p[j] = -rho_p[j] + b;
        d_pc[j] = -rho_p[j] + 2.0 * b;
        d_rho_pi[j] = -rho_pi[j] + c;
        d_pi[j] = -rho_pi[j] + 2.0 * c;
        d_rho_phi[j] = -rho_phi[j] + d;
        d_phi[j] = -rho_phi[j] + 2.0 * d;
    }
}

/// Dispatches to the derivative evaluator of `kind`.
pub fn derivatives(
    kind: ControllerKind,
    topo: &Topology,
    x: &[f64],
    recv: &Received,
    imbalance: &[f64],
    dx: &mut [f64],
) {
    match kind {
        ControllerKind::Naive => naive_derivatives(topo, x, recv, imbalance, dx),
        ControllerKind::Xi => xi_derivatives(topo, x, recv, imbalance, dx),
        ControllerKind::Reform => reform_derivatives(topo, x, recv, imbalance, dx),
        ControllerKind::Scatter => scatter_derivatives(topo, x, recv, imbalance, dx),
        ControllerKind::TieLine => tieline_derivatives(topo, x, recv, imbalance, dx),
        ControllerKind::TieLineScatter => tieline_scatter_derivatives(topo, x, recv, imbalance, dx),
    }
}

/// Multiplier dynamics of the lower and upper generation bounds.
pub fn bounds_derivatives(lambda: f64, mu: f64, pm: f64, pm_min: f64, pm_max: f64) -> (f64, f64) {
    (2.0 * lambda * (pm_min - pm), 2.0 * mu * (pm - pm_max))
}

/// Demand observer at a generator bus: returns the derivatives of the demand
/// estimate `chi` and the auxiliary frequency state `b`.
#[allow(clippy::too_many_arguments)]
pub fn observer_derivatives(
    chi: f64,
    b: f64,
    omega: f64,
    pc: f64,
    pm: f64,
    damping: f64,
    net_outflow: f64,
    inertia: f64,
    tau_chi: f64,
) -> (f64, f64) {
    ((b - omega - pc - chi) / tau_chi, (-chi + pm - damping * omega - net_outflow) / inertia)
}

/// Demand estimate at a load bus, read directly off its balance.
pub fn observer_load_estimate(omega: f64, damping: f64, net_outflow: f64) -> f64 {
    -damping * omega - net_outflow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BusParams, GeneratorParams, Line, NetworkModel};

    fn two_bus() -> Topology {
        let bus = BusParams {
            label: "1".into(),
            damping: 1.0,
            demand: 0.0,
            generator: Some(GeneratorParams::quadratic(1.0, 1.0, 1.0, 0.0)),
        };
        let model = NetworkModel {
            buses: vec![bus.clone(), bus],
            phys_lines: vec![Line::new(0, 1, 1.0)],
            comm_lines: vec![Line::new(0, 1, 1.0)],
            areas: vec![],
        };
        Topology::new(&model).unwrap()
    }

    #[test]
    fn reform_two_bus_definition() {
        let topo = two_bus();
        let x = [0.0, 0.0, 1.0, 0.0];
        let mut recv = Received::zeros(1);
        recv.at_head[0][RAW_PC] = 1.0;
        let mut dx = [0.0; 4];
        reform_derivatives(&topo, &x, &recv, &[0.0, 0.0], &mut dx);
        assert_eq!(dx[1], 1.0);
    }

    #[test]
    fn bounds_arithmetic() {
        assert_eq!(bounds_derivatives(1.0, 1.0, 0.5, 0.0, 10.0).0, -1.0);
        let (dl, dm) = bounds_derivatives(0.7, 0.3, 0.5, 0.0, 1.0);
        assert!((dl + 0.7).abs() < 1e-15 && (dm + 0.3).abs() < 1e-15);
        assert_eq!(bounds_derivatives(0.0, 0.0, 0.2, 0.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn observer_load_estimate_is_zero_without_flow() {
        assert_eq!(observer_load_estimate(0.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn field_layout() {
        let topo = two_bus();
        assert_eq!(ControllerKind::Naive.state_len(&topo), 4);
        assert_eq!(ControllerKind::TieLineScatter.state_len(&topo), 16);
        assert_eq!(ControllerKind::Scatter.pc_range(&topo), 6..8);
        for k in ControllerKind::ALL {
            assert_eq!(ControllerKind::from_name(k.name()), Some(k));
        }
    }
}
