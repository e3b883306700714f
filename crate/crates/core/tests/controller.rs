use freqsync::channel::instant_exchange;
use freqsync::controller::{
    bounds_derivatives, derivatives, observer_derivatives, observer_load_estimate, raw_broadcast, wave_output,
    ControllerKind, Received, R_P, R_ZETA,
};
use freqsync::fivebus;
use freqsync::network::{Area, Topology};
use proptest::prelude::*;

fn topo() -> Topology {
    Topology::new(&fivebus::model()).unwrap()
}

fn single_area_topo() -> Topology {
    let mut m = fivebus::model();
    m.areas = vec![Area { buses: (0..5).collect(), informed_bus: 0, schedule: 0.0 }];
    Topology::new(&m).unwrap()
}

/// What every link end receives when nothing is delayed.
fn undelayed(kind: ControllerKind, topo: &Topology, x: &[f64]) -> Received {
    let mut recv = Received::zeros(topo.n_comm());
    for (e, l) in topo.comm.iter().enumerate() {
        if kind.uses_scattering() {
            let same = topo.comm_same_area[e];
            let yt = wave_output(kind, topo, x, l.from, same);
            let yh = wave_output(kind, topo, x, l.to, same);
            let active = if same { 6 } else { 4 };
            let ex = instant_exchange(kind.frame_width(), active, &yt, &yh, 0.0, 0.0);
            recv.at_tail[e] = ex.r_tail;
            recv.at_head[e] = ex.r_head;
        } else {
            let t = raw_broadcast(kind, topo, x, l.from);
            let h = raw_broadcast(kind, topo, x, l.to);
            recv.at_head[e][..4].copy_from_slice(&t);
            recv.at_tail[e][..4].copy_from_slice(&h);
        }
    }
    recv
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n)
}

fn frames(n: usize) -> impl Strategy<Value = Vec<[f64; 6]>> {
    proptest::collection::vec(proptest::array::uniform6(-2.0f64..2.0), n)
}

fn eval(kind: ControllerKind, topo: &Topology, x: &[f64], recv: &Received, imb: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; kind.state_len(topo)];
    derivatives(kind, topo, x, recv, imb, &mut dx);
    dx
}

proptest! {
    #[test]
    fn undelayed_reform_conserves_total_command(x in values(10), imb in values(5)) {
        let t = topo();
        let dx = eval(ControllerKind::Reform, &t, &x, &undelayed(ControllerKind::Reform, &t, &x), &imb);
        let total: f64 = dx[5..10].iter().sum();
        prop_assert!((total + imb.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!(dx[..5].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn undelayed_naive_copies_move_together(pc in values(5), psi in values(5), imb in values(5)) {
        let t = topo();
        let x: Vec<f64> = psi.iter().chain(&psi).chain(&pc).copied().collect();
        let dx = eval(ControllerKind::Naive, &t, &x, &undelayed(ControllerKind::Naive, &t, &x), &imb);
        prop_assert_eq!(&dx[..5], &dx[5..10]);
        let total: f64 = dx[10..].iter().sum();
        prop_assert!((total + imb.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn compensator_identity_holds(x in values(20), imb in values(5), a in frames(5), b in frames(5)) {
        let t = topo();
        let recv = Received { at_tail: a, at_head: b };
        let dx = eval(ControllerKind::Scatter, &t, &x, &recv, &imb);
        for j in 0..5 {
            prop_assert!((dx[5 + j] - 2.0 * dx[j] - x[j]).abs() < 1e-12);
            prop_assert!((dx[15 + j] - 2.0 * dx[10 + j] - x[10 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn tieline_compensator_identity_holds(x in values(40), imb in values(5), a in frames(5), b in frames(5)) {
        let t = topo();
        let recv = Received { at_tail: a, at_head: b };
        let dx = eval(ControllerKind::TieLineScatter, &t, &x, &recv, &imb);
        for block in 0..4 {
            let (rho, main) = (10 * block, 10 * block + 5);
            for j in 0..5 {
                prop_assert!((dx[main + j] - 2.0 * dx[rho + j] - x[rho + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scatter_without_compensation_matches_reform(zeta in values(5), pc in values(5), imb in values(5)) {
        let t = topo();
        let zeros = vec![0.0; 5];
        let xs: Vec<f64> = zeros.iter().chain(&zeta).chain(&zeros).chain(&pc).copied().collect();
        let xr: Vec<f64> = zeta.iter().chain(&pc).copied().collect();
        let ds = eval(ControllerKind::Scatter, &t, &xs, &undelayed(ControllerKind::Scatter, &t, &xs), &imb);
        let dr = eval(ControllerKind::Reform, &t, &xr, &undelayed(ControllerKind::Reform, &t, &xr), &imb);
        for j in 0..5 {
            prop_assert!((ds[5 + j] - 2.0 * dr[j]).abs() < 1e-12);
            prop_assert!((ds[15 + j] - 2.0 * dr[5 + j]).abs() < 1e-12);
            prop_assert!((2.0 * ds[j] - ds[5 + j]).abs() < 1e-12);
            prop_assert!((2.0 * ds[10 + j] - ds[15 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn tieline_reduces_to_base_law_in_one_area(base in values(20), imb in values(5)) {
        let t = single_area_topo();
        let zeros = vec![0.0; 20];
        let xt: Vec<f64> = base.iter().chain(&zeros).copied().collect();
        let dt = eval(ControllerKind::TieLineScatter, &t, &xt, &undelayed(ControllerKind::TieLineScatter, &t, &xt), &imb);
        let ds = eval(ControllerKind::Scatter, &t, &base, &undelayed(ControllerKind::Scatter, &t, &base), &imb);
        prop_assert_eq!(&dt[..20], &ds[..]);
    }

    #[test]
    fn zero_delay_decode_returns_neighbour_values(x in values(20)) {
        let t = topo();
        let recv = undelayed(ControllerKind::Scatter, &t, &x);
        for (e, l) in t.comm.iter().enumerate() {
            prop_assert!((recv.at_head[e][R_P] - x[15 + l.from]).abs() < 1e-12);
            prop_assert!((recv.at_head[e][R_ZETA] - x[5 + l.from]).abs() < 1e-12);
            prop_assert!((recv.at_tail[e][R_P] - x[15 + l.to]).abs() < 1e-12);
            prop_assert!((recv.at_tail[e][R_ZETA] - x[5 + l.to]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_multiplier_stays_zero(mu in 0.0f64..3.0, pm in -1.0f64..2.0) {
        let (dl, _) = bounds_derivatives(0.0, mu, pm, 0.0, 1.0);
        prop_assert_eq!(dl, 0.0);
    }
}

#[test]
fn consensus_fixed_point_is_at_rest() {
    let t = topo();
    for kind in [ControllerKind::Reform, ControllerKind::Scatter, ControllerKind::Xi, ControllerKind::Naive] {
        let mut x = vec![0.0; kind.state_len(&t)];
        x[kind.pc_range(&t)].iter_mut().for_each(|v| *v = 0.7);
        let dx = eval(kind, &t, &x, &undelayed(kind, &t, &x), &[0.0; 5]);
        assert!(dx.iter().all(|v| v.abs() < 1e-15), "{kind:?}: {dx:?}");
    }
}

#[test]
fn two_bus_reform_example() {
    let m = {
        let mut m = fivebus::model();
        m.buses.truncate(2);
        m.phys_lines = vec![freqsync::network::Line::new(0, 1, 1.0)];
        m.comm_lines = vec![freqsync::network::Line::new(0, 1, 1.0)];
        m.areas.clear();
        m
    };
    let t = Topology::new(&m).unwrap();
    let x = [0.0, 0.0, 1.0, 0.0];
    let dx = eval(ControllerKind::Reform, &t, &x, &undelayed(ControllerKind::Reform, &t, &x), &[0.0, 0.0]);
    assert_eq!(dx[1], 1.0);
    assert_eq!(dx[0], -1.0);
}

#[test]
fn multiplier_examples() {
    assert_eq!(bounds_derivatives(1.0, 1.0, 0.5, 0.0, 2.0).0, -1.0);
    let (dl, dm) = bounds_derivatives(0.3, 0.7, 0.5, 0.0, 1.0);
    assert!((dl + 0.3).abs() < 1e-15 && (dm + 0.7).abs() < 1e-15);
}

#[test]
fn observer_rests_at_true_demand() {
    let (pl, pc, pm, out, inertia) = (0.4, 0.9, 0.7, 0.3, 13.0);
    let b = pl + pc;
    let (dchi, db) = observer_derivatives(pl, b, 0.0, pc, pm, 1.0, out, inertia, 0.1);
    assert!(dchi.abs() < 1e-15 && db.abs() < 1e-15);
    assert_eq!(observer_load_estimate(0.0, 1.0, 0.0), 0.0);
    assert!((observer_load_estimate(0.1, 0.9, -0.5) - 0.41).abs() < 1e-15);
}

