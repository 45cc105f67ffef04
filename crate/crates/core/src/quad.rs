//! Adaptive Simpson quadrature.

const MAX_DEPTH: u32 = 48;
/// Refinement stops once this many subintervals have been split.
const MAX_SPLITS: usize = 1 << 20;

/// ∫_a^b f with absolute error target `tol`. Reversed limits give the
/// negated integral.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if b < a {
        return -adaptive_simpson(f, b, a, tol);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut budget = MAX_SPLITS;
    refine(&f, a, m, b, fa, fm, fb, whole, tol, MAX_DEPTH, &mut budget)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    budget: &mut usize,
) -> f64 {
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    // a target below the rounding level of the panel sums cannot be met
    let floor = 64.0 * f64::EPSILON * (left.abs() + right.abs());
    if depth == 0 || *budget == 0 || delta.abs() <= 15.0 * tol.max(floor) {
        return left + right + delta / 15.0;
    }
    *budget -= 1;
    refine(f, a, lm, m, fa, flm, fm, left, 0.5 * tol, depth - 1, budget)
        + refine(
            f,
            m,
            rm,
            b,
            fm,
            frm,
            fb,
            right,
            0.5 * tol,
            depth - 1,
            budget,
        )
}
