//! The transformed HJB equation as a linear first-order ODE for W = V_β.
//!
//! After substituting the β-identities into the HJB equation and using
//! V_t = βV_β/t, every term is proportional to V_β or V_ββ:
//!
//! ```text
//! A(β) V_ββ + B(β) V_β = 0
//! A(β) = σ²π²x²/(2β²) + β²/(2y²) + ρσπβ/(xy)
//! B(β) = β[1/t + r + (μ−r)π/x + b/y] + ρσπβ/(xy)
//! ```
//!
//! with (t, x, y, π) frozen. Then W(β) = c·exp(−∫₁^β B/A).
//!
//! At β = 1 the closed-form portfolio is evaluated two ways: the printed
//! rule ([`optimal_pi_paper`]) and the root of the first-order condition of
//! the β = 1 equation in π ([`foc_root`]). The first terms agree; the second
//! terms differ by a factor σ.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coefficients, MarketModel, Utility};
use crate::quad::adaptive_simpson;

pub const DEFAULT_CURVATURE_FLOOR: f64 = 1e-12;
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Frozen parameters of the reduced equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedParams {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub pi: f64,
    pub coeffs: Coefficients,
    pub rho: f64,
}

impl ReducedParams {
    /// `t = +inf` is accepted and removes the 1/t term.
    pub fn new(t: f64, x: f64, y: f64, pi: f64, coeffs: Coefficients, rho: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Precondition(format!("t must be > 0, got {t}")));
        }
        if x == 0.0 || !x.is_finite() {
            return Err(Error::Precondition(format!(
                "x must be finite and nonzero, got {x}"
            )));
        }
        if y == 0.0 || !y.is_finite() {
            return Err(Error::Precondition(format!(
                "y must be finite and nonzero, got {y}"
            )));
        }
        if !pi.is_finite() {
            return Err(Error::Precondition(format!("pi must be finite, got {pi}")));
        }
        Ok(ReducedParams {
            t,
            x,
            y,
            pi,
            coeffs,
            rho,
        })
    }

    pub fn at(model: &MarketModel, t: f64, x: f64, y: f64, pi: f64) -> Result<Self> {
        Self::new(t, x, y, pi, model.eval_coefficients(y)?, model.rho())
    }

    fn with_pi(&self, pi: f64) -> Self {
        ReducedParams { pi, ..*self }
    }
}

/// Left-hand side of the transformed equation, term by term as displayed.
pub fn reduced_lhs(beta: f64, v_beta: f64, v_betabeta: f64, p: &ReducedParams) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Precondition(format!("beta must be > 0, got {beta}")));
    }
    let Coefficients { r, mu, sigma, b } = p.coeffs;
    let (x, y, pi) = (p.x, p.y, p.pi);
    Ok(beta * v_beta / p.t
        + r * beta * v_beta
        + (mu - r) * pi * beta * v_beta / x
        + 0.5 * sigma * sigma * pi * pi * x * x * v_betabeta / (beta * beta)
        + b * beta * v_beta / y
        + 0.5 * beta * beta * v_betabeta / (y * y)
        + p.rho * sigma * pi * beta * (v_betabeta + v_beta) / (x * y))
}

/// `A(β) W' + B(β) W = 0`.
pub trait LinearFirstOrder {
    fn a(&self, beta: f64) -> f64;
    fn b(&self, beta: f64) -> f64;
}

/// A, B collected from [`reduced_lhs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedCoefficients {
    pub params: ReducedParams,
}

impl LinearFirstOrder for ReducedCoefficients {
    fn a(&self, beta: f64) -> f64 {
        let p = &self.params;
        let s = p.coeffs.sigma;
        s * s * p.pi * p.pi * p.x * p.x / (2.0 * beta * beta)
            + beta * beta / (2.0 * p.y * p.y)
            + p.rho * s * p.pi * beta / (p.x * p.y)
    }

    fn b(&self, beta: f64) -> f64 {
        let p = &self.params;
        let c = &p.coeffs;
        beta * (1.0 / p.t + c.r + (c.mu - c.r) * p.pi / p.x + c.b / p.y)
            + p.rho * c.sigma * p.pi * beta / (p.x * p.y)
    }
}

pub fn collect_ode(params: &ReducedParams) -> ReducedCoefficients {
    ReducedCoefficients { params: *params }
}

/// An ODE given directly by its coefficient functions.
pub struct CustomOde<FA, FB> {
    pub a: FA,
    pub b: FB,
}

impl<FA: Fn(f64) -> f64, FB: Fn(f64) -> f64> LinearFirstOrder for CustomOde<FA, FB> {
    fn a(&self, beta: f64) -> f64 {
        (self.a)(beta)
    }
    fn b(&self, beta: f64) -> f64 {
        (self.b)(beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeSolution {
    pub betas: Vec<f64>,
    pub w: Vec<f64>,
    /// |A W' + B W| / (|A W'| + |B W| + ε) per node, W' from a local
    /// fourth-order stencil.
    pub residuals: Vec<f64>,
    pub c: f64,
}

impl OdeSolution {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// CSV `beta,W,residual`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "beta,W,residual")?;
        for ((b, w), r) in self.betas.iter().zip(&self.w).zip(&self.residuals) {
            writeln!(out, "{b:.15e},{w:.15e},{r:.15e}")?;
        }
        Ok(())
    }
}

const SIGN_SAMPLES: usize = 4096;

/// Fails with the bracketing interval if A vanishes or changes sign on
/// [lo, hi].
fn check_a_sign<O: LinearFirstOrder>(ode: &O, lo: f64, hi: f64) -> Result<()> {
    let mut prev_beta = lo;
    let mut prev = ode.a(lo);
    if prev == 0.0 || !prev.is_finite() {
        return Err(Error::SingularCoefficient { lo, hi: lo });
    }
    for k in 1..=SIGN_SAMPLES {
        let beta = lo + (hi - lo) * k as f64 / SIGN_SAMPLES as f64;
        let a = ode.a(beta);
        if a == 0.0 || !a.is_finite() || a.signum() != prev.signum() {
            return Err(Error::SingularCoefficient {
                lo: prev_beta,
                hi: beta,
            });
        }
        prev_beta = beta;
        prev = a;
    }
    Ok(())
}

/// W(β) = c·exp(−∫₁^β B/A) on `nodes` uniform points of `range` (β = 1 is
/// inserted when it falls inside).
pub fn solve_vbeta<O: LinearFirstOrder>(
    ode: &O,
    range: (f64, f64),
    nodes: usize,
    c: f64,
) -> Result<OdeSolution> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi > lo) || nodes < 2 {
        return Err(Error::Precondition(format!(
            "need 0 < beta_lo < beta_hi and >= 2 nodes, got [{lo}, {hi}] with {nodes}"
        )));
    }
    if c == 0.0 || !c.is_finite() {
        return Err(Error::Precondition(
            "normalization c must be finite and nonzero".into(),
        ));
    }
    check_a_sign(ode, lo.min(1.0), hi.max(1.0))?;

    let mut betas: Vec<f64> = (0..nodes)
        .map(|k| lo + (hi - lo) * k as f64 / (nodes - 1) as f64)
        .collect();
    if lo < 1.0 && hi > 1.0 && !betas.contains(&1.0) {
        let at = betas.partition_point(|&b| b < 1.0);
        betas.insert(at, 1.0);
    }

    let ratio = |s: f64| ode.b(s) / ode.a(s);
    let mut w = Vec::with_capacity(betas.len());
    let mut residuals = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let wb = c * (-adaptive_simpson(ratio, 1.0, beta, QUADRATURE_TOL)).exp();
        // the stencil step resolves both the growth rate |B/A| and the scale
        // on which A itself varies, which is short where A nearly vanishes
        let e = 1e-6 * beta;
        let a_rate = ((ode.a(beta + e) - ode.a(beta - e)) / (2.0 * e * ode.a(beta))).abs();
        let delta = 1e-3 * beta / (1.0 + beta * (ratio(beta).abs() + a_rate));
        // W(β + kδ) − W(β) via expm1; the stencil weights sum to zero, so
        // differencing the increments avoids cancellation when W is flat
        let step = |k: f64| wb * (-adaptive_simpson(ratio, beta, beta + k * delta, 1e-15)).exp_m1();
        let dw = (-step(2.0) + 8.0 * step(1.0) - 8.0 * step(-1.0) + step(-2.0)) / (12.0 * delta);
        let (a, b) = (ode.a(beta), ode.b(beta));
        let floor = f64::EPSILON * (a.abs() + b.abs()) * wb.abs();
        residuals.push((a * dw + b * wb).abs() / ((a * dw).abs() + (b * wb).abs() + floor));
        w.push(wb);
    }
    Ok(OdeSolution {
        betas,
        w,
        residuals,
        c,
    })
}

fn check_point(x: f64, y: f64, sigma: f64) -> Result<()> {
    if !(x > 0.0) {
        return Err(Error::Precondition(format!("x must be > 0, got {x}")));
    }
    if y == 0.0 || !y.is_finite() {
        return Err(Error::Precondition(format!("y must be nonzero, got {y}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    Ok(())
}

/// The two terms of the printed closed-form portfolio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PiTerms {
    pub first: f64,
    pub second: f64,
}

impl PiTerms {
    pub fn total(&self) -> f64 {
        self.first + self.second
    }
}

/// `−(μ−r)V_β/(σ²x³V_ββ) − ρσ(V_ββ+V_β)/(σx³yV_ββ)`, term by term.
pub fn paper_pi_terms(
    v_beta: f64,
    v_betabeta: f64,
    x: f64,
    y: f64,
    coeffs: &Coefficients,
    rho: f64,
    curvature_floor: f64,
) -> Result<PiTerms> {
    check_point(x, y, coeffs.sigma)?;
    if v_betabeta.abs() < curvature_floor || !v_betabeta.is_finite() {
        return Err(Error::DegenerateCurvature {
            value: v_betabeta.abs(),
        });
    }
    let s = coeffs.sigma;
    let x3 = x * x * x;
    Ok(PiTerms {
        first: -coeffs.excess_return() * v_beta / (s * s * x3 * v_betabeta),
        second: -rho * s * (v_betabeta + v_beta) / (s * x3 * y * v_betabeta),
    })
}

/// The printed closed-form optimal portfolio at β = 1.
pub fn optimal_pi_paper(
    v_beta: f64,
    v_betabeta: f64,
    t: f64,
    x: f64,
    y: f64,
    model: &MarketModel,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("t must be > 0, got {t}")));
    }
    let c = model.eval_coefficients(y)?;
    Ok(paper_pi_terms(
        v_beta,
        v_betabeta,
        x,
        y,
        &c,
        model.rho(),
        DEFAULT_CURVATURE_FLOOR,
    )?
    .total())
}

/// The π-dependent part of the β = 1 equation:
/// `(μ−r)πV_β/x + ½σ²π²x²V_ββ + ρσπ(V_ββ+V_β)/(xy)`.
pub fn display_pi_terms(
    pi: f64,
    v_beta: f64,
    v_betabeta: f64,
    x: f64,
    y: f64,
    coeffs: &Coefficients,
    rho: f64,
) -> f64 {
    let s = coeffs.sigma;
    coeffs.excess_return() * pi * v_beta / x
        + 0.5 * s * s * pi * pi * x * x * v_betabeta
        + rho * s * pi * (v_betabeta + v_beta) / (x * y)
}

/// d/dπ of [`display_pi_terms`].
pub fn foc_derivative(
    pi: f64,
    v_beta: f64,
    v_betabeta: f64,
    x: f64,
    y: f64,
    coeffs: &Coefficients,
    rho: f64,
) -> f64 {
    let s = coeffs.sigma;
    coeffs.excess_return() * v_beta / x
        + s * s * pi * x * x * v_betabeta
        + rho * s * (v_betabeta + v_beta) / (x * y)
}

pub fn foc_residual(
    pi_star: f64,
    v_beta: f64,
    v_betabeta: f64,
    t: f64,
    x: f64,
    y: f64,
    model: &MarketModel,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("t must be > 0, got {t}")));
    }
    let c = model.eval_coefficients(y)?;
    check_point(x, y, c.sigma)?;
    Ok(foc_derivative(
        pi_star,
        v_beta,
        v_betabeta,
        x,
        y,
        &c,
        model.rho(),
    ))
}

/// Root in π of the first-order condition of the β = 1 equation.
pub fn foc_root(
    v_beta: f64,
    v_betabeta: f64,
    x: f64,
    y: f64,
    coeffs: &Coefficients,
    rho: f64,
    curvature_floor: f64,
) -> Result<f64> {
    check_point(x, y, coeffs.sigma)?;
    if v_betabeta.abs() < curvature_floor || !v_betabeta.is_finite() {
        return Err(Error::DegenerateCurvature {
            value: v_betabeta.abs(),
        });
    }
    let s = coeffs.sigma;
    let linear = coeffs.excess_return() * v_beta / x + rho * s * (v_betabeta + v_beta) / (x * y);
    Ok(-linear / (s * s * x * x * v_betabeta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiVariant {
    /// The printed closed form.
    Printed,
    /// The first-order-condition root of the β = 1 equation.
    FocRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub curvature_floor: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        CouplingOptions {
            max_iter: 100,
            rel_tol: 1e-8,
            curvature_floor: DEFAULT_CURVATURE_FLOOR,
        }
    }
}

/// A converged (π, V_β, V_ββ) at β = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoupledPolicy {
    pub pi: f64,
    pub v_beta: f64,
    pub v_betabeta: f64,
    pub iterations: usize,
}

struct Iterate {
    pi: f64,
    v_betabeta: f64,
    iterations: usize,
    last_change: f64,
    converged: bool,
}

fn variant_pi(
    variant: PiVariant,
    v_beta: f64,
    v_betabeta: f64,
    base: &ReducedParams,
    floor: f64,
) -> Result<f64> {
    match variant {
        PiVariant::Printed => Ok(paper_pi_terms(
            v_beta,
            v_betabeta,
            base.x,
            base.y,
            &base.coeffs,
            base.rho,
            floor,
        )?
        .total()),
        PiVariant::FocRoot => foc_root(
            v_beta,
            v_betabeta,
            base.x,
            base.y,
            &base.coeffs,
            base.rho,
            floor,
        ),
    }
}

fn iterate(
    base: &ReducedParams,
    c: f64,
    variant: PiVariant,
    opts: &CouplingOptions,
) -> Result<Iterate> {
    // curvature proxy V_ββ / V_β = -1
    let mut pi = variant_pi(variant, c, -c, base, opts.curvature_floor)?;
    let mut v_betabeta = -c;
    let mut last_change = f64::INFINITY;
    for k in 1..=opts.max_iter {
        let ode = collect_ode(&base.with_pi(pi));
        let a = ode.a(1.0);
        if a == 0.0 || !a.is_finite() {
            return Err(Error::SingularCoefficient { lo: 1.0, hi: 1.0 });
        }
        // W'(1) from the ODE with W(1) = c
        let vbb = -ode.b(1.0) * c / a;
        let next = variant_pi(variant, c, vbb, base, opts.curvature_floor)?;
        if !next.is_finite() {
            break;
        }
        let change = (next - pi).abs();
        last_change = change / next.abs().max(f64::MIN_POSITIVE);
        pi = next;
        v_betabeta = vbb;
        if change <= opts.rel_tol * next.abs() {
            return Ok(Iterate {
                pi,
                v_betabeta,
                iterations: k,
                last_change,
                converged: true,
            });
        }
    }
    Ok(Iterate {
        pi,
        v_betabeta,
        iterations: opts.max_iter,
        last_change,
        converged: false,
    })
}

/// Fixed-point coupling of π with the β-ODE at β = 1, started from the
/// Merton-like portfolio with V_ββ/V_β = −1.
pub fn couple_policy(
    model: &MarketModel,
    t: f64,
    x: f64,
    y: f64,
    c: f64,
    variant: PiVariant,
    opts: &CouplingOptions,
) -> Result<CoupledPolicy> {
    if c == 0.0 || !c.is_finite() {
        return Err(Error::Precondition(
            "normalization c must be finite and nonzero".into(),
        ));
    }
    let base = ReducedParams::at(model, t, x, y, 0.0)?;
    let it = iterate(&base, c, variant, opts)?;
    if !it.converged {
        return Err(Error::NonConvergence {
            iterations: it.iterations,
            last_change: it.last_change,
        });
    }
    Ok(CoupledPolicy {
        pi: it.pi,
        v_beta: c,
        v_betabeta: it.v_betabeta,
        iterations: it.iterations,
    })
}

/// Default normalization W(1) = x·u'(x), which reproduces V = u at t = T
/// through V_x = βV_β/x.
pub fn default_normalization(utility: &Utility, x: f64) -> Result<f64> {
    Ok(x * utility.eval(x)?.du)
}

/// The closed-form rule as an evaluable policy.
///
/// The printed formula is homogeneous of degree zero in (V_β, V_ββ), so the
/// portfolio does not depend on the normalization c. Where the formula is not
/// evaluable (x ≤ 0, y = 0) the rule invests nothing; where the coupling does
/// not converge it uses the last iterate. The result is clipped to `bounds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaperRule {
    pub variant: PiVariant,
    pub options: CouplingOptions,
    pub bounds: (f64, f64),
}

impl PaperRule {
    pub fn new(bounds: (f64, f64)) -> Self {
        PaperRule {
            variant: PiVariant::Printed,
            options: CouplingOptions::default(),
            bounds,
        }
    }

    pub fn evaluate(&self, model: &MarketModel, t: f64, x: f64, y: f64) -> f64 {
        let raw = ReducedParams::new(t, x, y, 0.0, model.coefficients_clamped(y), model.rho())
            .and_then(|base| {
                if x > 0.0 {
                    iterate(&base, 1.0, self.variant, &self.options).map(|it| it.pi)
                } else {
                    Ok(0.0)
                }
            })
            .unwrap_or(0.0);
        let pi = if raw.is_finite() { raw } else { 0.0 };
        pi.clamp(self.bounds.0, self.bounds.1)
    }
}
