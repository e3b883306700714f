//! Dispatch oracle against an independent brute-force search.

use freqsync::fivebus;
use freqsync::opt::{injections, kkt_residual, solve_dispatch, solve_tieline_dispatch, solve_bounded_dispatch, solve_power_flow};

/// Minimizes total quadratic cost over (p1, p2) with p3 fixed by the balance,
/// by repeatedly refining a grid around the best point. `cap1` limits p1.
/// Comparing cost values near a minimum resolves the argmin only to about 1e-8.
fn brute_force(load: f64, cap1: f64) -> [f64; 3] {
    let cost = |p: [f64; 3]| -> f64 {
        (0..3).map(|g| 0.5 * fivebus::COST_Q[g] * (p[g] - fivebus::COST_C[g]).powi(2)).sum()
    };
    let (mut c1, mut c2, mut half) = (0.0_f64, 0.0_f64, 2.0_f64);
    for _ in 0..60 {
        let mut best = (f64::INFINITY, c1, c2);
        for a in -20..=20 {
            for b in -20..=20 {
                let p1 = (c1 + half * a as f64 / 20.0).min(cap1);
                let p2 = c2 + half * b as f64 / 20.0;
                let v = cost([p1, p2, load - p1 - p2]);
                if v < best.0 {
                    best = (v, p1, p2);
                }
            }
        }
        c1 = best.1;
        c2 = best.2;
        half *= 0.5;
    }
    [c1, c2, load - c1 - c2]
}

#[test]
fn basic_dispatch_matches_brute_force() {
    let oracle = brute_force(1.5, f64::INFINITY);
    let sol = solve_dispatch(&fivebus::model()).unwrap();
    for g in 0..3 {
        assert!((sol.pm[g] - oracle[g]).abs() < 1e-7, "unit {g}: {} vs {}", sol.pm[g], oracle[g]);
    }
}

#[test]
fn basic_dispatch_frozen_values() {
    let sol = solve_dispatch(&fivebus::model()).unwrap();
    assert!((sol.beta[0] - 0.9367347).abs() < 1e-7);
    for (p, e) in sol.pm.iter().zip([0.6903061, 0.3341837, 0.4755102]) {
        assert!((p - e).abs() < 1e-7);
    }
    assert!(kkt_residual(&fivebus::model(), &sol) < 1e-10);
}

#[test]
fn capped_dispatch_matches_brute_force() {
    let model = fivebus::model_with_cap(0, 0.6);
    let oracle = brute_force(1.5, 0.6);
    let sol = solve_bounded_dispatch(&model).unwrap();
    for g in 0..3 {
        assert!((sol.pm[g] - oracle[g]).abs() < 1e-7, "unit {g}: {} vs {}", sol.pm[g], oracle[g]);
    }
    assert!((sol.beta[0] - 1.1027027).abs() < 1e-7);
    for (p, e) in sol.pm.iter().zip([0.6, 0.3756757, 0.5243243]) {
        assert!((p - e).abs() < 1e-7);
    }
    assert!((sol.mu_bar[0] - 0.3827027).abs() < 1e-7);
    assert_eq!(sol.lambda_bar, vec![0.0; 3]);
    assert!(kkt_residual(&model, &sol) < 1e-10);
}

#[test]
fn area_dispatch_balances_each_area() {
    let model = fivebus::model();
    let sol = solve_tieline_dispatch(&model).unwrap();
    // Area {1,2,4} carries demand 0.7 and exports 0.5; area {3,5} imports 0.5.
    assert!((sol.pm[0] + sol.pm[1] - 1.2).abs() < 1e-12);
    assert!((sol.pm[2] - 0.3).abs() < 1e-12);
    assert!((sol.beta[0] - 1.2).abs() < 1e-12);
    assert!(kkt_residual(&model, &sol) < 1e-10);
}

#[test]
fn single_area_without_schedule_equals_basic() {
    let mut model = fivebus::model();
    model.areas = vec![freqsync::network::Area { buses: (0..5).collect(), informed_bus: 0, schedule: 0.0 }];
    let a = solve_dispatch(&model).unwrap();
    let b = solve_tieline_dispatch(&model).unwrap();
    for (x, y) in a.pm.iter().zip(&b.pm) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn power_flow_balances_injections() {
    let model = fivebus::model();
    let sol = solve_dispatch(&model).unwrap();
    let inj = injections(&model, &sol);
    let pf = solve_power_flow(&model, &inj).unwrap();
    let mut out = vec![0.0; 5];
    for (l, f) in model.phys_lines.iter().zip(&pf.flows) {
        out[l.from] += f;
        out[l.to] -= f;
    }
    for j in 0..5 {
        assert!((out[j] - inj[j]).abs() < 1e-12);
    }
    assert!(pf.eta.iter().all(|e| e.abs() < std::f64::consts::FRAC_PI_2));
}
