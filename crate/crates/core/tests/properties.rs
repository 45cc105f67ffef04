use proptest::prelude::*;

use shiftlab::analytic::Analytic;
use shiftlab::hjb::{argmax_pi_closed, hamiltonian_term};
use shiftlab::mc::pairwise_sum;
use shiftlab::reduction::{collect_ode, reduced_lhs, solve_vbeta, LinearFirstOrder, ReducedParams};
use shiftlab::shift::{check_identity, IdentityId, ShiftPoint};
use shiftlab::{Coefficients, GridSpec, MarketModel, Utility, ValueSurface};

fn coefficients() -> impl Strategy<Value = Coefficients> {
    (0.0..0.08f64, -0.1..0.3f64, 0.05..0.8f64, -1.0..1.0f64)
        .prop_map(|(r, mu, sigma, b)| Coefficients { r, mu, sigma, b })
}

fn params() -> impl Strategy<Value = ReducedParams> {
    (
        0.1..3.0f64,
        0.1..3.0f64,
        prop_oneof![0.1..3.0f64, -3.0..-0.1f64],
        -5.0..5.0f64,
        coefficients(),
        -0.95..0.95f64,
    )
        .prop_map(|(t, x, y, pi, c, rho)| ReducedParams::new(t, x, y, pi, c, rho).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn reduced_equation_is_linear(
        p in params(),
        beta in 0.2..3.0f64,
        (w1, d1, w2, d2) in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
        (a, b) in (-3.0..3.0f64, -3.0..3.0f64),
    ) {
        let lhs = |w, d| reduced_lhs(beta, w, d, &p).unwrap();
        let combined = lhs(a * w1 + b * w2, a * d1 + b * d2);
        let separate = a * lhs(w1, d1) + b * lhs(w2, d2);
        prop_assert!(close(combined, separate, 1e-12), "{combined} vs {separate}");
    }

    #[test]
    fn collected_coefficients_reproduce_the_equation(
        p in params(),
        beta in 0.2..3.0f64,
        (w, d) in (-5.0..5.0f64, -5.0..5.0f64),
    ) {
        let ode = collect_ode(&p);
        let direct = reduced_lhs(beta, w, d, &p).unwrap();
        let collected = ode.a(beta) * d + ode.b(beta) * w;
        prop_assert!(close(direct, collected, 1e-12), "{direct} vs {collected}");
    }

    #[test]
    fn beta_ode_solution_is_normalized_and_sign_stable(
        p in params(),
        c in prop_oneof![0.1..10.0f64, -10.0..-0.1f64],
    ) {
        // a sign change of A is a reported error, not a solution
        if let Ok(sol) = solve_vbeta(&collect_ode(&p), (0.5, 2.0), 61, c) {
            let at_one = sol.betas.iter().position(|&b| b == 1.0).unwrap();
            prop_assert_eq!(sol.w[at_one], c);
            prop_assert!(sol.w.iter().all(|w| w.signum() == c.signum()));
            prop_assert!(sol.max_residual() < 1e-8, "{}", sol.max_residual());
        }
    }

    #[test]
    fn closed_form_argmax_beats_every_other_portfolio(
        c in coefficients(),
        rho in -0.95..0.95f64,
        vx in 0.01..5.0f64,
        vxx in -5.0..5.0f64,
        vxy in -3.0..3.0f64,
        others in prop::collection::vec(-20.0..20.0f64, 16),
    ) {
        let bounds = [-20.0, 20.0];
        let best = argmax_pi_closed(vx, vxx, vxy, &c, rho, bounds, 1e-12);
        let h = |pi| hamiltonian_term(pi, vx, vxx, vxy, &c, rho);
        prop_assert!(best.pi >= bounds[0] && best.pi <= bounds[1]);
        for pi in others.into_iter().chain(bounds) {
            prop_assert!(h(best.pi) >= h(pi) - 1e-12 * (1.0 + h(pi).abs()), "{} < {}", h(best.pi), h(pi));
        }
    }

    #[test]
    fn interpolation_reproduces_nodes(
        values in prop::collection::vec(-100.0..100.0f64, 5 * 6 * 4),
        (k, i, j) in (0..5usize, 0..6usize, 0..4usize),
    ) {
        let grid = GridSpec {
            t0: 0.5, t_end: 1.5, nt: 4,
            x_min: 0.1, x_max: 2.1, nx: 6,
            y_min: -1.0, y_max: 2.0, ny: 4,
        };
        let s = ValueSurface::new(grid, values, "random").unwrap();
        let got = s.interpolate(grid.t(k), grid.x(i), grid.y(j)).unwrap();
        prop_assert_eq!(got, s.get(k, i, j));
    }

    #[test]
    fn marginal_utility_decreases(
        a in 0.01..50.0f64,
        b in 0.01..50.0f64,
        gamma in prop_oneof![-4.0..-0.01f64, 0.01..0.99f64],
        alpha in 0.05..5.0f64,
    ) {
        prop_assume!((a - b).abs() > 1e-6 * a.max(b));
        let (lo, hi) = (a.min(b), a.max(b));
        for u in [Utility::Power { gamma }, Utility::Exponential { alpha }, Utility::Log] {
            prop_assert!(u.eval(lo).unwrap().du > u.eval(hi).unwrap().du, "{u:?} at {lo}, {hi}");
        }
    }

    #[test]
    fn shift_point_products_are_consistent(
        beta in 0.01..10.0f64,
        x in -10.0..10.0f64,
        y in -10.0..10.0f64,
        t in 0.01..5.0f64,
    ) {
        let p = ShiftPoint::new(beta, x, y, t).unwrap();
        prop_assert_eq!(p.g(), beta * x);
        prop_assert_eq!(p.f(), beta * y);
    }

    #[test]
    fn scope_local_identities_hold_at_random_points(
        x in 0.5..1.5f64,
        y in 0.5..1.5f64,
        which in 0..5usize,
    ) {
        let f = Analytic::CORE_SUITE[which];
        let p = ShiftPoint::new(1.0, x, y, 1.0).unwrap();
        for id in IdentityId::SCOPE_LOCAL {
            let r = check_identity(&f, &p, id, 1e-6, 1e-4).unwrap();
            prop_assert!(r.pass, "{id} on {f}: {}", r.residual);
        }
    }

    #[test]
    fn joint_identity_holds_for_product_functions(
        x in 0.5..1.5f64,
        y in 0.5..1.5f64,
        which in 0..5usize,
    ) {
        let f = Analytic::PRODUCT_FAMILY[which];
        let p = ShiftPoint::new(1.0, x, y, 1.0).unwrap();
        let r = check_identity(&f, &p, IdentityId::Eq9, 1e-5, 1e-4).unwrap();
        prop_assert!(r.pass, "{f}: {}", r.residual);
    }

    #[test]
    fn pairwise_sum_of_integers_is_exact(v in prop::collection::vec(-1_000_000i64..1_000_000, 0..500)) {
        let floats: Vec<f64> = v.iter().map(|&n| n as f64).collect();
        prop_assert_eq!(pairwise_sum(&floats), v.iter().sum::<i64>() as f64);
    }

    #[test]
    fn correlation_must_lie_strictly_inside_unit_interval(rho in prop_oneof![1.0..5.0f64, -5.0..-1.0f64]) {
        prop_assert!(MarketModel::constant(0.03, 0.1, 0.25, 0.0, rho).is_err());
    }
}
