use freqsync::channel::DelaySpec;
use freqsync::controller::{ControllerConfig, ControllerKind};
use freqsync::dde::{run, Assembly, InitialState, LoadProfile, Prehistory, RunSpec};
use freqsync::fivebus;
use freqsync::lyapunov::{
    components, line_potential, monotonicity_probe, multiplier_storage, run_diagnosed, window_storage,
    Equilibrium, WindowIntegral,
};
use proptest::prelude::*;

fn equilibrium(kind: ControllerKind) -> (Assembly, Equilibrium) {
    let model = fivebus::model();
    let cfg = ControllerConfig::new(kind);
    let asm = Assembly::new(&model, &cfg).unwrap();
    let eq = Equilibrium::build(&asm, &model).unwrap();
    (asm, eq)
}

#[test]
fn storage_vanishes_at_equilibrium() {
    for kind in ControllerKind::ALL {
        let (asm, eq) = equilibrium(kind);
        assert_eq!(components(&asm, &eq.state, &eq).total(), 0.0, "{kind:?}");
    }
}

#[test]
fn kinetic_term_example() {
    let (asm, eq) = equilibrium(ControllerKind::Reform);
    let mut x = eq.state.clone();
    x[asm.layout.omega.start] += 0.1;
    let c = components(&asm, &x, &eq);
    assert!((c.kinetic - 0.065).abs() < 1e-15, "{}", c.kinetic);
    assert!((c.total() - 0.065).abs() < 1e-15);
}

#[test]
fn line_potential_about_zero_is_one_minus_cosine() {
    for d in [-1.0, -0.3, 0.0, 0.2, 1.4] {
        assert!((line_potential(2.5, d, 0.0) - 2.5 * (1.0 - f64::cos(d))).abs() < 1e-15);
    }
}

#[test]
fn window_of_constant_offset() {
    let samples = vec![1.0; 2001];
    assert!((window_storage(&samples, 1e-3, 0.5, 1.0) - 0.5).abs() < 1e-12);
    // the window reaches back before zero, where `pre` applies
    assert!((window_storage(&samples[..101], 1e-3, 0.5, 3.0) - (0.1 + 0.4 * 3.0)).abs() < 1e-12);
    let mut w = WindowIntegral::new(1e-3, 0.5, 1.0);
    for &s in &samples {
        w.push(s);
    }
    assert!((w.value() - 0.5).abs() < 1e-12);
}

#[test]
fn multiplier_storage_example() {
    assert_eq!(multiplier_storage(2.0, 0.0), 1.0);
    assert_eq!(multiplier_storage(0.7, 0.7), 0.0);
}

proptest! {
    #[test]
    fn running_window_matches_direct_quadrature(
        samples in proptest::collection::vec(0.0f64..4.0, 1..400),
        delay in 0.0f64..0.3,
        pre in 0.0f64..2.0,
    ) {
        let h = 1e-3;
        let mut w = WindowIntegral::new(h, delay, pre);
        for (n, &s) in samples.iter().enumerate() {
            w.push(s);
            let direct = if delay == 0.0 { 0.0 } else { window_storage(&samples[..=n], h, delay, pre) };
            prop_assert!((w.value() - direct).abs() < 1e-12, "n {n}: {} vs {direct}", w.value());
        }
    }

    #[test]
    fn multiplier_storage_dominates_quadratic(l in 1e-3f64..5.0, l_star in 0.0f64..5.0) {
        let v = multiplier_storage(l, l_star);
        prop_assert!(v >= 0.25 * (l - l_star).powi(2) - 1e-12, "{v}");
    }
}

fn delayed_scatter(t_end: f64) -> RunSpec {
    let mut s = RunSpec::new(fivebus::model(), ControllerConfig::new(ControllerKind::Scatter));
    s.delays = DelaySpec::Interval { lo: 0.1, hi: 1.0, seed: 5 };
    s.sim.t_end = t_end;
    s.sim.record_every = 10;
    s
}

#[test]
fn total_storage_is_core_plus_channel() {
    let (tr, _) = run_diagnosed(&delayed_scatter(30.0)).unwrap();
    let (b, s, all) = (tr.column("V_B").unwrap(), tr.column("V_S").unwrap(), tr.column("V_all").unwrap());
    for i in 0..all.len() {
        assert!((b[i] + s[i] - all[i]).abs() <= 1e-12 * all[i].abs().max(1.0));
    }
    assert!(s.iter().all(|&v| v >= 0.0));
    let d = tr.diagnostics.unwrap();
    assert!(d.min_channel_storage.unwrap() >= 0.0);
    assert!(d.max_increment <= 1e-9, "{}", d.max_increment);
}

#[test]
fn probe_is_flat_at_rest() {
    let (asm, eq) = equilibrium(ControllerKind::Scatter);
    let mut s = delayed_scatter(5.0);
    s.load = LoadProfile::constant(fivebus::model().demand());
    s.sim.prehistory = Prehistory::Steady;
    s.initial = InitialState::Given(eq.state.clone());
    s.diagnostics = Some(eq);
    let tr = run(&s).unwrap();
    let p = monotonicity_probe(&tr, "V_all").unwrap();
    assert!(p <= 1e-12, "{p:.3e}");
    assert!(asm.layout.len == tr.final_state.len());
}

#[test]
fn probe_flags_growing_storage() {
    let (_, eq) = equilibrium(ControllerKind::Reform);
    let mut s = RunSpec::new(fivebus::model(), ControllerConfig::new(ControllerKind::Reform));
    s.delays = DelaySpec::Uniform(1.0);
    s.sim.t_end = 25.0;
    s.diagnostics = Some(eq);
    let tr = run(&s).unwrap();
    let p = monotonicity_probe(&tr, "V_all").unwrap();
    assert!(p > 1e-6, "{p:.3e}");
    assert!(monotonicity_probe(&tr, "no_such_column").is_none());
}
