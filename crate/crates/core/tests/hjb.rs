use shiftlab::hjb::{
    argmax_pi_brute, argmax_pi_closed, extract_policy, solve, step_backward, Scheme, SolverConfig,
};
use shiftlab::model::{Affine, Coefficients};
use shiftlab::{CoefficientFamily, Error, GridSpec, MarketModel, PolicyField, Utility};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn merton_market() -> MarketModel {
    MarketModel::constant(0.03, 0.10, 0.25, 0.0, 0.0).unwrap()
}

fn grid(nt: usize, nx: usize, ny: usize) -> GridSpec {
    GridSpec {
        t0: 1.0,
        t_end: 2.0,
        nt,
        x_min: 0.2,
        x_max: 4.2,
        nx,
        y_min: -4.0,
        y_max: 6.0,
        ny,
    }
}

fn merton_value(tau: f64, x: f64) -> f64 {
    let gamma: f64 = 0.5;
    let delta = gamma * (0.03 + 0.07f64.powi(2) / (2.0 * 0.0625 * (1.0 - gamma)));
    (delta * tau).exp() * x.powf(gamma) / gamma
}

#[test]
fn closed_argmax_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bounds = [-5.0, 5.0];
    let cells = 100_000;
    let width = (bounds[1] - bounds[0]) / cells as f64;
    for _ in 0..1000 {
        let c = Coefficients {
            r: rng.random_range(0.0..0.05),
            mu: rng.random_range(0.0..0.2),
            sigma: rng.random_range(0.1..0.6),
            b: 0.0,
        };
        let rho = rng.random_range(-0.9..0.9);
        let (vx, vxx, vxy) = (
            rng.random_range(0.1..2.0),
            rng.random_range(-3.0..-0.05),
            rng.random_range(-1.0..1.0),
        );
        let closed = argmax_pi_closed(vx, vxx, vxy, &c, rho, bounds, 1e-12).pi;
        let brute = argmax_pi_brute(vx, vxx, vxy, &c, rho, bounds, cells);
        assert!((closed - brute).abs() <= width, "{closed} vs {brute}");
    }
}

#[test]
fn constant_slice_is_a_steady_state() {
    let g = grid(10, 9, 9);
    let v = vec![3.5; g.slice_len()];
    let out = step_backward(&v, 0.1, &merton_market(), &g, &SolverConfig::default()).unwrap();
    assert!(out.values.iter().all(|&x| (x - 3.5).abs() < 1e-14));
    assert_eq!(out.clipped_nodes, g.slice_len());
}

#[test]
fn non_finite_slice_is_rejected() {
    let g = grid(10, 9, 9);
    let mut v = vec![1.0; g.slice_len()];
    v[7] = f64::NAN;
    let err = step_backward(&v, 0.1, &merton_market(), &g, &SolverConfig::default());
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn one_step_local_error_is_second_order() {
    let g = GridSpec {
        nx: 161,
        ..grid(10, 161, 5)
    };
    let model = merton_market();
    let start: Vec<f64> = (0..g.slice_len())
        .map(|k| merton_value(0.0, g.x(k / g.ny)))
        .collect();
    let mut errs = Vec::new();
    for dt in [0.04, 0.02] {
        let out = step_backward(&start, dt, &model, &g, &SolverConfig::default()).unwrap();
        let i = 80;
        let got = out.values[i * g.ny + 2];
        errs.push((got / merton_value(dt, g.x(i)) - 1.0).abs());
    }
    assert!(errs[0] < 0.5 * 0.04 * 0.04, "{errs:?}");
    assert!(errs[0] / errs[1] > 3.0, "{errs:?}");
}

#[test]
fn merton_power_on_a_coarse_grid() {
    let g = grid(50, 41, 11);
    let s = solve(
        &merton_market(),
        &Utility::Power { gamma: 0.5 },
        &g,
        &SolverConfig::default(),
    )
    .unwrap();
    for i in 8..=32 {
        let x = g.x(i);
        for k in [0, 25, 49] {
            let tau = g.t_end - g.t(k);
            let v = s.value.get(k, i, 5);
            assert!((v / merton_value(tau, x) - 1.0).abs() < 1e-3);
            assert!((s.policy.get(k, i, 5) / x / 2.24 - 1.0).abs() < 0.01);
        }
    }
    assert_eq!(s.monotonicity_violations(), 0);
    assert_eq!(s.argmax_mismatches(), 0);
    assert_eq!(s.diagnostics.len(), 50);
}

#[test]
fn terminal_slice_is_exact() {
    let g = grid(8, 21, 5);
    let u = Utility::Log;
    let s = solve(&merton_market(), &u, &g, &SolverConfig::default()).unwrap();
    for i in 0..g.nx {
        for j in 0..g.ny {
            assert_eq!(s.value.get(g.nt, i, j), u.value(g.x(i)).unwrap());
        }
    }
}

#[test]
fn no_excess_return_means_no_risky_position() {
    let g = grid(20, 21, 9);
    let model = MarketModel::constant(0.03, 0.03, 0.25, 0.0, 0.0).unwrap();
    let s = solve(
        &model,
        &Utility::Power { gamma: 0.5 },
        &g,
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(s.policy.values().iter().all(|p| p.abs() < 1e-12));
    for i in 1..g.nx {
        assert!(s.value.get(0, i, 4) > s.value.get(0, i - 1, 4));
    }
    // V(t, x) = u(x e^{r τ}); pure drift is upwinded, so first order in dx
    let exact = Utility::Power { gamma: 0.5 }
        .value(g.x(10) * (0.03f64).exp())
        .unwrap();
    let rel = (s.value.get(0, 10, 4) / exact - 1.0).abs();
    assert!(rel < 1e-3, "{rel}");
}

#[test]
fn exponential_policy_does_not_depend_on_wealth() {
    let g = grid(40, 41, 11);
    let s = solve(
        &merton_market(),
        &Utility::Exponential { alpha: 1.0 },
        &g,
        &SolverConfig::default(),
    )
    .unwrap();
    let exact = 1.12 * (-0.03f64).exp();
    for i in 8..=32 {
        assert!((s.policy.get(0, i, 5) / exact - 1.0).abs() < 0.01);
    }
}

#[test]
fn explicit_scheme_enforces_its_step_bound() {
    let g = grid(10, 41, 11);
    let cfg = SolverConfig {
        scheme: Scheme::Explicit,
        ..SolverConfig::default()
    };
    let err = solve(&merton_market(), &Utility::Power { gamma: 0.5 }, &g, &cfg).unwrap_err();
    match err {
        Error::Stability { cfl, .. } => assert!(cfl > 1.0),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn explicit_and_implicit_agree_when_both_are_stable() {
    let g = grid(10, 21, 9);
    let model = merton_market();
    let u = Utility::Power { gamma: 0.5 };
    let explicit = SolverConfig {
        scheme: Scheme::Explicit,
        dt: Some(2e-4),
        ..SolverConfig::default()
    };
    let implicit = SolverConfig {
        dt: Some(2e-4),
        ..SolverConfig::default()
    };
    let a = solve(&model, &u, &g, &explicit).unwrap();
    let b = solve(&model, &u, &g, &implicit).unwrap();
    for (p, q) in a.value.values().iter().zip(b.value.values()) {
        assert!((p / q - 1.0).abs() < 1e-4);
    }
}

#[test]
fn table_range_must_cover_the_grid() {
    let family = CoefficientFamily::Table {
        y: vec![-1.0, 0.0, 1.0],
        r: vec![0.03; 3],
        mu: vec![0.1; 3],
        sigma: vec![0.25; 3],
        b: vec![0.0; 3],
    };
    let model = MarketModel::new(family, 0.0, 1e-3).unwrap();
    let err = solve(
        &model,
        &Utility::Log,
        &grid(4, 9, 9),
        &SolverConfig::default(),
    );
    assert!(matches!(err, Err(Error::Domain { .. })));
}

#[test]
fn correlated_factor_run_is_well_behaved_and_thread_independent() {
    let family = CoefficientFamily::Affine {
        r: Affine {
            intercept: 0.03,
            slope: 0.005,
        },
        mu: Affine {
            intercept: 0.10,
            slope: 0.01,
        },
        sigma: Affine {
            intercept: 0.25,
            slope: 0.02,
        },
        b: Affine {
            intercept: 0.0,
            slope: -0.3,
        },
        clamp: [-4.0, 6.0],
    };
    let model = MarketModel::new(family, -0.5, 1e-3).unwrap();
    let g = grid(20, 31, 21);
    let cfg = SolverConfig {
        dt: Some(0.005),
        ..SolverConfig::default()
    };
    let u = Utility::Power { gamma: 0.5 };
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| solve(&model, &u, &g, &cfg).unwrap());
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| solve(&model, &u, &g, &cfg).unwrap());
    assert_eq!(one.value.values(), many.value.values());
    assert_eq!(one.monotonicity_violations(), 0);
    assert_eq!(one.argmax_mismatches(), 0);
    assert!(one.diagnostics.iter().all(|d| d.cfl <= 1.0));
}

#[test]
fn extracted_policy_reproduces_nodes() {
    let g = grid(8, 21, 5);
    let s = solve(
        &merton_market(),
        &Utility::Log,
        &g,
        &SolverConfig::default(),
    )
    .unwrap();
    let field = extract_policy(&s);
    assert!(matches!(field, PolicyField::Grid(_)));
    let model = merton_market();
    for (k, i, j) in [(0, 3, 1), (4, 10, 2), (7, 17, 4)] {
        let p = field.evaluate(&model, g.t(k), g.x(i), g.y(j));
        assert_eq!(p.pi, s.policy.get(k, i, j));
        assert!(!p.clamped);
    }
    let outside = field.evaluate(&model, g.t(0), g.x_max + 1.0, 0.0);
    assert!(outside.clamped);
}
