//! Shift-parameter derivative identities.
//!
//! A function V(x, y) is rewritten as V(βx, y) (or V(x, βy), or V(βt, ..))
//! with β = 1 initially, and derivatives in x, y, t are recovered from
//! derivatives in β. Each β-derivative carries the [`ScalingScope`] it was
//! taken in: the identities are chain-rule facts only within their own scope,
//! and mixing scopes is exactly where they stop holding.
//!
//! Scope conventions:
//!
//! | identity | relation                         | scope     |
//! |----------|----------------------------------|-----------|
//! | EQ1      | V_x  = β V_β / x                 | X_SCALING |
//! | EQ2      | V_xx = β² V_ββ / x²              | X_SCALING |
//! | EQ3      | V_yy = β² V_ββ / y²              | Y_SCALING |
//! | EQ4      | V_y  = β V_β / y                 | Y_SCALING |
//! | EQ5      | V_βy = x V_xy / β                | X_SCALING |
//! | EQ6      | V_yy = β [β y V_βy − V_β] / y²   | Y_SCALING |
//! | EQ9      | V_xy = β (V_ββ + V_β) / (x y)    | JOINT     |
//! | VT       | V_t  = β V_β / t                 | T_SCALING |
//!
//! EQ2 is implemented as β²V_ββ/x², the orientation forced by
//! V_ββ = V_gg x² and V_xx = V_gg β². The reversed ratio x²V_ββ/β² is still
//! evaluated by [`check_identity`] and reported as the alternate residual.
//!
//! JOINT derivatives are taken along the y-dilation: EQ9 arises by feeding
//! the x-scope cross derivative (EQ5) into the y-scope EQ6, and its final
//! form only involves the y-dilation derivatives. It is exact for functions
//! of the product x·y and fails elsewhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytic::TestFunction;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScalingScope {
    XScaling,
    YScaling,
    TScaling,
    Joint,
}

impl fmt::Display for ScalingScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingScope::XScaling => "X_SCALING",
            ScalingScope::YScaling => "Y_SCALING",
            ScalingScope::TScaling => "T_SCALING",
            ScalingScope::Joint => "JOINT",
        })
    }
}

/// Evaluation point (β, x, y, t). The products g = βx and f = βy are
/// always recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftPoint {
    beta: f64,
    x: f64,
    y: f64,
    t: f64,
}

impl ShiftPoint {
    pub fn new(beta: f64, x: f64, y: f64, t: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Precondition(format!("beta must be > 0, got {beta}")));
        }
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Precondition(format!("t must be > 0, got {t}")));
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Precondition("x and y must be finite".into()));
        }
        Ok(ShiftPoint { beta, x, y, t })
    }

    /// Point at the initial shift β = 1.
    pub fn initial(x: f64, y: f64, t: f64) -> Result<Self> {
        Self::new(1.0, x, y, t)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn t(&self) -> f64 {
        self.t
    }
    pub fn g(&self) -> f64 {
        self.beta * self.x
    }
    pub fn f(&self) -> f64 {
        self.beta * self.y
    }

    /// V with the scoped argument dilated by `b`, the other arguments fixed.
    fn scaled(&self, v: &dyn TestFunction, scope: ScalingScope, b: f64) -> f64 {
        match scope {
            ScalingScope::XScaling => v.eval(self.t, b * self.x, self.y),
            ScalingScope::YScaling | ScalingScope::Joint => v.eval(self.t, self.x, b * self.y),
            ScalingScope::TScaling => v.eval(b * self.t, self.x, self.y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaDerivatives {
    pub v_beta: f64,
    pub v_betabeta: f64,
    pub scope: ScalingScope,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(what.to_string()))
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h <= 0.1 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "step h must be in (0, 0.1], got {h}"
        )))
    }
}

/// Central-difference first and second β-derivatives of the scoped dilation
/// of `v`, with step `h·β`.
pub fn beta_derivative_fd(
    v: &dyn TestFunction,
    point: &ShiftPoint,
    scope: ScalingScope,
    h: f64,
) -> Result<BetaDerivatives> {
    check_step(h)?;
    let b = point.beta;
    let hb = h * b;
    let what = || format!("{} in {scope} scope", v.name());
    let up = finite(point.scaled(v, scope, b + hb), &what())?;
    let mid = finite(point.scaled(v, scope, b), &what())?;
    let down = finite(point.scaled(v, scope, b - hb), &what())?;
    Ok(BetaDerivatives {
        v_beta: (up - down) / (2.0 * hb),
        v_betabeta: (up - 2.0 * mid + down) / (hb * hb),
        scope,
    })
}

fn require_scope(d: &BetaDerivatives, expected: ScalingScope) -> Result<()> {
    if d.scope == expected {
        Ok(())
    } else {
        Err(Error::ScopeMismatch {
            expected: match expected {
                ScalingScope::XScaling => "X_SCALING",
                ScalingScope::YScaling => "Y_SCALING",
                ScalingScope::TScaling => "T_SCALING",
                ScalingScope::Joint => "JOINT",
            },
            got: d.scope,
        })
    }
}

fn nonzero(v: f64, what: &str) -> Result<f64> {
    if v != 0.0 {
        Ok(v)
    } else {
        Err(Error::Precondition(format!("{what} must be nonzero")))
    }
}

/// V_x = β V_β / x.
pub fn vx_from_beta(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::XScaling)?;
    Ok(p.beta * d.v_beta / nonzero(p.x, "x")?)
}

/// V_xx = β² V_ββ / x².
pub fn vxx_from_beta(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::XScaling)?;
    let x = nonzero(p.x, "x")?;
    Ok(p.beta * p.beta * d.v_betabeta / (x * x))
}

/// The reversed ratio x² V_ββ / β², kept for comparison only.
pub fn vxx_from_beta_reversed(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::XScaling)?;
    Ok(p.x * p.x * d.v_betabeta / (p.beta * p.beta))
}

/// V_y = β V_β / y.
pub fn vy_from_beta(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::YScaling)?;
    Ok(p.beta * d.v_beta / nonzero(p.y, "y")?)
}

/// V_yy = β² V_ββ / y².
pub fn vyy_from_beta(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::YScaling)?;
    let y = nonzero(p.y, "y")?;
    Ok(p.beta * p.beta * d.v_betabeta / (y * y))
}

/// V_βy = x V_xy / β.
pub fn vbetay_from_vxy(v_xy: f64, p: &ShiftPoint) -> Result<f64> {
    Ok(p.x * v_xy / p.beta)
}

/// V_yy = β [β y V_βy − V_β] / y², with V_β and V_βy taken in y-scope.
pub fn vyy_from_mixed(v_beta: f64, v_betay: f64, p: &ShiftPoint) -> Result<f64> {
    let y = nonzero(p.y, "y")?;
    Ok(p.beta * (p.beta * y * v_betay - v_beta) / (y * y))
}

/// V_xy = β (V_ββ + V_β) / (x y). Exact only when x V_x = y V_y, i.e. for
/// functions of x·y.
pub fn vxy_from_beta(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::Joint)?;
    let xy = nonzero(p.x, "x")? * nonzero(p.y, "y")?;
    Ok(p.beta * (d.v_betabeta + d.v_beta) / xy)
}

/// V_t = β V_β / t.
pub fn vt_from_beta(d: &BetaDerivatives, p: &ShiftPoint) -> Result<f64> {
    require_scope(d, ScalingScope::TScaling)?;
    if p.t <= 0.0 {
        return Err(Error::Precondition(format!("t must be > 0, got {}", p.t)));
    }
    Ok(p.beta * d.v_beta / p.t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdentityId {
    #[serde(rename = "EQ1")]
    Eq1,
    #[serde(rename = "EQ2")]
    Eq2,
    #[serde(rename = "EQ3")]
    Eq3,
    #[serde(rename = "EQ4")]
    Eq4,
    #[serde(rename = "EQ5")]
    Eq5,
    #[serde(rename = "EQ6")]
    Eq6,
    #[serde(rename = "EQ9")]
    Eq9,
    #[serde(rename = "VT")]
    Vt,
}

impl IdentityId {
    pub const ALL: [IdentityId; 8] = [
        IdentityId::Eq1,
        IdentityId::Eq2,
        IdentityId::Eq3,
        IdentityId::Eq4,
        IdentityId::Eq5,
        IdentityId::Eq6,
        IdentityId::Eq9,
        IdentityId::Vt,
    ];

    /// The identities that hold for every smooth function in their own scope.
    pub const SCOPE_LOCAL: [IdentityId; 7] = [
        IdentityId::Eq1,
        IdentityId::Eq2,
        IdentityId::Eq3,
        IdentityId::Eq4,
        IdentityId::Eq5,
        IdentityId::Eq6,
        IdentityId::Vt,
    ];

    pub fn scope(&self) -> ScalingScope {
        match self {
            IdentityId::Eq1 | IdentityId::Eq2 | IdentityId::Eq5 => ScalingScope::XScaling,
            IdentityId::Eq3 | IdentityId::Eq4 | IdentityId::Eq6 => ScalingScope::YScaling,
            IdentityId::Eq9 => ScalingScope::Joint,
            IdentityId::Vt => ScalingScope::TScaling,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            IdentityId::Eq1 => "EQ1",
            IdentityId::Eq2 => "EQ2",
            IdentityId::Eq3 => "EQ3",
            IdentityId::Eq4 => "EQ4",
            IdentityId::Eq5 => "EQ5",
            IdentityId::Eq6 => "EQ6",
            IdentityId::Eq9 => "EQ9",
            IdentityId::Vt => "VT",
        }
    }
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IdentityId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        IdentityId::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown identity '{s}'"))
    }
}

/// Outcome of one identity check. `residual` is
/// |transform − direct| / (1 + |direct|).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub identity: IdentityId,
    pub function: String,
    pub point: ShiftPoint,
    pub scope: ScalingScope,
    pub residual: f64,
    pub pass: bool,
    pub h: f64,
    pub transform_side: f64,
    pub direct_side: f64,
    /// Residual of the alternate form (reversed ratio, or for EQ9 the
    /// x-dilation derivatives).
    pub alt_residual: f64,
    pub alt_form: &'static str,
}

fn relative_residual(transform: f64, direct: f64) -> f64 {
    (transform - direct).abs() / (1.0 + direct.abs())
}

/// Direct derivatives of V by central differences in (t, x, y), with
/// relative step `h·max(|v|, 1)` per axis.
struct Direct<'a> {
    v: &'a dyn TestFunction,
    t: f64,
    x: f64,
    y: f64,
    h: f64,
}

impl Direct<'_> {
    fn step(&self, at: f64) -> f64 {
        self.h * at.abs().max(1.0)
    }

    fn eval(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        finite(self.v.eval(t, x, y), &self.v.name())
    }

    fn d_x(&self) -> Result<f64> {
        let s = self.step(self.x);
        Ok(
            (self.eval(self.t, self.x + s, self.y)? - self.eval(self.t, self.x - s, self.y)?)
                / (2.0 * s),
        )
    }

    fn d_xx(&self) -> Result<f64> {
        let s = self.step(self.x);
        Ok(
            (self.eval(self.t, self.x + s, self.y)? - 2.0 * self.eval(self.t, self.x, self.y)?
                + self.eval(self.t, self.x - s, self.y)?)
                / (s * s),
        )
    }

    fn d_y(&self) -> Result<f64> {
        let s = self.step(self.y);
        Ok(
            (self.eval(self.t, self.x, self.y + s)? - self.eval(self.t, self.x, self.y - s)?)
                / (2.0 * s),
        )
    }

    fn d_yy(&self) -> Result<f64> {
        let s = self.step(self.y);
        Ok(
            (self.eval(self.t, self.x, self.y + s)? - 2.0 * self.eval(self.t, self.x, self.y)?
                + self.eval(self.t, self.x, self.y - s)?)
                / (s * s),
        )
    }

    fn d_xy(&self) -> Result<f64> {
        let (sx, sy) = (self.step(self.x), self.step(self.y));
        let (t, x, y) = (self.t, self.x, self.y);
        Ok((self.eval(t, x + sx, y + sy)?
            - self.eval(t, x + sx, y - sy)?
            - self.eval(t, x - sx, y + sy)?
            + self.eval(t, x - sx, y - sy)?)
            / (4.0 * sx * sy))
    }

    fn d_t(&self) -> Result<f64> {
        let s = self.step(self.t);
        Ok(
            (self.eval(self.t + s, self.x, self.y)? - self.eval(self.t - s, self.x, self.y)?)
                / (2.0 * s),
        )
    }
}

/// Mixed β–y central difference of the scoped dilation.
fn beta_y_mixed(v: &dyn TestFunction, p: &ShiftPoint, scope: ScalingScope, h: f64) -> Result<f64> {
    let hb = h * p.beta;
    let hy = h * p.y.abs().max(1.0);
    let at = |b: f64, dy: f64| -> Result<f64> {
        let shifted = ShiftPoint { y: p.y + dy, ..*p };
        finite(shifted.scaled(v, scope, b), &v.name())
    };
    Ok(
        (at(p.beta + hb, hy)? - at(p.beta + hb, -hy)? - at(p.beta - hb, hy)?
            + at(p.beta - hb, -hy)?)
            / (4.0 * hb * hy),
    )
}

/// V composed with the scope's dilation, as a plain function of (t, x, y).
struct Dilated<'a> {
    v: &'a dyn TestFunction,
    scope: ScalingScope,
    beta: f64,
}

impl TestFunction for Dilated<'_> {
    fn name(&self) -> String {
        self.v.name()
    }

    fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        let b = self.beta;
        match self.scope {
            ScalingScope::XScaling => self.v.eval(t, b * x, y),
            ScalingScope::YScaling | ScalingScope::Joint => self.v.eval(t, x, b * y),
            ScalingScope::TScaling => self.v.eval(b * t, x, y),
        }
    }
}

/// Evaluate both sides of `identity` at `point`: the transform side from
/// β-differences, the direct side from (t, x, y)-differences of the dilated
/// function.
pub fn check_identity(
    v: &dyn TestFunction,
    point: &ShiftPoint,
    identity: IdentityId,
    tolerance: f64,
    h: f64,
) -> Result<IdentityReport> {
    if !(tolerance > 0.0) {
        return Err(Error::Precondition(format!(
            "tolerance must be > 0, got {tolerance}"
        )));
    }
    check_step(h)?;
    let scope = identity.scope();
    let p = point;
    let dilated = Dilated {
        v,
        scope,
        beta: p.beta,
    };
    let direct = Direct {
        v: &dilated,
        t: p.t,
        x: p.x,
        y: p.y,
        h,
    };
    let d = beta_derivative_fd(v, p, scope, h)?;
    let b = p.beta;

    let (transform, direct_side, alt, alt_form) = match identity {
        IdentityId::Eq1 => {
            let lhs = direct.d_x()?;
            (vx_from_beta(&d, p)?, lhs, p.x * d.v_beta / b, "x V_b / b")
        }
        IdentityId::Eq2 => (
            vxx_from_beta(&d, p)?,
            direct.d_xx()?,
            vxx_from_beta_reversed(&d, p)?,
            "x^2 V_bb / b^2",
        ),
        IdentityId::Eq3 => (
            vyy_from_beta(&d, p)?,
            direct.d_yy()?,
            p.y * p.y * d.v_betabeta / (b * b),
            "y^2 V_bb / b^2",
        ),
        IdentityId::Eq4 => (
            vy_from_beta(&d, p)?,
            direct.d_y()?,
            p.y * d.v_beta / b,
            "y V_b / b",
        ),
        IdentityId::Eq5 => {
            let v_betay = beta_y_mixed(v, p, ScalingScope::XScaling, h)?;
            let rhs = vbetay_from_vxy(direct.d_xy()?, p)?;
            (v_betay, rhs, v_betay * b / p.x, "V_by b / x")
        }
        IdentityId::Eq6 => {
            let v_betay = beta_y_mixed(v, p, ScalingScope::YScaling, h)?;
            let yy = vyy_from_mixed(d.v_beta, v_betay, p)?;
            // derivative of V_y = b V_b / y without the extra factor b on V_by
            let y = p.y;
            (
                yy,
                direct.d_yy()?,
                b * (y * v_betay - d.v_beta) / (y * y),
                "b [y V_by - V_b] / y^2",
            )
        }
        IdentityId::Eq9 => {
            let dx = beta_derivative_fd(v, p, ScalingScope::XScaling, h)?;
            let alt = b * (dx.v_betabeta + dx.v_beta) / (nonzero(p.x, "x")? * nonzero(p.y, "y")?);
            (
                vxy_from_beta(&d, p)?,
                direct.d_xy()?,
                alt,
                "x-dilation derivatives",
            )
        }
        IdentityId::Vt => (
            vt_from_beta(&d, p)?,
            direct.d_t()?,
            p.t * d.v_beta / b,
            "t V_b / b",
        ),
    };
    let residual = relative_residual(transform, direct_side);
    Ok(IdentityReport {
        identity,
        function: v.name(),
        point: *p,
        scope,
        residual,
        pass: residual < tolerance,
        h,
        transform_side: transform,
        direct_side,
        alt_residual: relative_residual(alt, direct_side),
        alt_form,
    })
}

/// Ratio of the residual at step `h` to the residual at `h / 2`. Close to 4
/// for second-order differences in the truncation-dominated regime.
pub fn convergence_ratio(
    v: &dyn TestFunction,
    point: &ShiftPoint,
    identity: IdentityId,
    h: f64,
) -> Result<f64> {
    let coarse = check_identity(v, point, identity, 1.0, h)?.residual;
    let fine = check_identity(v, point, identity, 1.0, h / 2.0)?.residual;
    Ok(coarse / fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{Analytic, FnTest};
    use std::f64::consts::E;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn shift_point_products_and_preconditions() {
        let p = ShiftPoint::new(1.5, 2.0, -3.0, 0.5).unwrap();
        assert_eq!(p.g(), 3.0);
        assert_eq!(p.f(), -4.5);
        assert!(ShiftPoint::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ShiftPoint::new(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn beta_derivatives_of_bilinear_and_square() {
        let p = ShiftPoint::initial(2.0, 3.0, 1.0).unwrap();
        let d = beta_derivative_fd(&Analytic::Xy, &p, ScalingScope::XScaling, 1e-4).unwrap();
        assert!(close(d.v_beta, 6.0, 1e-9) && d.v_betabeta.abs() < 1e-6);
        let d = beta_derivative_fd(&Analytic::X2, &p, ScalingScope::XScaling, 1e-4).unwrap();
        assert!(close(d.v_beta, 8.0, 1e-9) && close(d.v_betabeta, 8.0, 1e-6));
    }

    #[test]
    fn beta_derivatives_of_exp_in_y_scope() {
        // analytic: d/dβ e^{βxy} = xy e^{βxy}, d²/dβ² = (xy)² e^{βxy}
        let p = ShiftPoint::initial(1.0, 1.0, 1.0).unwrap();
        let d = beta_derivative_fd(&Analytic::ExpXy, &p, ScalingScope::YScaling, 1e-4).unwrap();
        assert!(close(d.v_beta, E, 1e-8));
        assert!(close(d.v_betabeta, E, 1e-6));
    }

    #[test]
    fn step_and_evaluation_errors() {
        let p = ShiftPoint::initial(1.0, 1.0, 1.0).unwrap();
        assert!(beta_derivative_fd(&Analytic::Xy, &p, ScalingScope::XScaling, 0.2).is_err());
        assert!(beta_derivative_fd(&Analytic::Xy, &p, ScalingScope::XScaling, 0.0).is_err());
        let bad = FnTest::new("nan", |_, x: f64, _| if x > 1.0 { f64::NAN } else { x });
        assert!(matches!(
            beta_derivative_fd(&bad, &p, ScalingScope::XScaling, 1e-3),
            Err(Error::Evaluation(_))
        ));
    }

    fn derivs(v_beta: f64, v_betabeta: f64, scope: ScalingScope) -> BetaDerivatives {
        BetaDerivatives {
            v_beta,
            v_betabeta,
            scope,
        }
    }

    #[test]
    fn vx_and_vxx_maps() {
        let p = ShiftPoint::initial(2.0, 3.0, 1.0).unwrap();
        assert_eq!(
            vx_from_beta(&derivs(8.0, 8.0, ScalingScope::XScaling), &p).unwrap(),
            4.0
        );
        assert_eq!(
            vx_from_beta(&derivs(6.0, 0.0, ScalingScope::XScaling), &p).unwrap(),
            3.0
        );
        assert!(matches!(
            vx_from_beta(&derivs(6.0, 0.0, ScalingScope::YScaling), &p),
            Err(Error::ScopeMismatch { .. })
        ));
        // V = x², V_xx = 2; the reversed ratio would give 32
        assert_eq!(
            vxx_from_beta(&derivs(8.0, 8.0, ScalingScope::XScaling), &p).unwrap(),
            2.0
        );
        assert_eq!(
            vxx_from_beta_reversed(&derivs(8.0, 8.0, ScalingScope::XScaling), &p).unwrap(),
            32.0
        );
        assert_eq!(
            vxx_from_beta(&derivs(6.0, 0.0, ScalingScope::XScaling), &p).unwrap(),
            0.0
        );
        assert!(vxx_from_beta(&derivs(8.0, 8.0, ScalingScope::TScaling), &p).is_err());
    }

    #[test]
    fn vy_and_vyy_maps() {
        let p = ShiftPoint::initial(1.0, 1.0, 1.0).unwrap();
        assert_eq!(
            vy_from_beta(&derivs(E, E, ScalingScope::YScaling), &p).unwrap(),
            E
        );
        assert_eq!(
            vyy_from_beta(&derivs(E, E, ScalingScope::YScaling), &p).unwrap(),
            E
        );
        assert_eq!(
            vy_from_beta(&derivs(0.0, 0.0, ScalingScope::YScaling), &p).unwrap(),
            0.0
        );
        assert_eq!(
            vyy_from_beta(&derivs(1.0, 0.0, ScalingScope::YScaling), &p).unwrap(),
            0.0
        );
        let on_axis = ShiftPoint::initial(1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            vy_from_beta(&derivs(1.0, 0.0, ScalingScope::YScaling), &on_axis),
            Err(Error::Precondition(_))
        ));
        assert!(vyy_from_beta(&derivs(1.0, 1.0, ScalingScope::XScaling), &p).is_err());
    }

    #[test]
    fn cross_derivative_maps() {
        let p = ShiftPoint::initial(2.0, 3.0, 1.0).unwrap();
        assert_eq!(vbetay_from_vxy(1.0, &p).unwrap(), 2.0);
        assert_eq!(vbetay_from_vxy(0.0, &p).unwrap(), 0.0);
        let unit = ShiftPoint::initial(1.0, 1.0, 1.0).unwrap();
        // V = e^{xy}: V_xy = (1 + xy) e^{xy} = 2e at (1, 1)
        assert_eq!(vbetay_from_vxy(2.0 * E, &unit).unwrap(), 2.0 * E);
        assert_eq!(
            vxy_from_beta(&derivs(E, E, ScalingScope::Joint), &unit).unwrap(),
            2.0 * E
        );
        assert_eq!(
            vxy_from_beta(&derivs(6.0, 0.0, ScalingScope::Joint), &p).unwrap(),
            1.0
        );
        assert!(vxy_from_beta(&derivs(E, E, ScalingScope::XScaling), &unit).is_err());
    }

    #[test]
    fn time_map() {
        let p = ShiftPoint::initial(1.0, 1.0, 3.0).unwrap();
        assert_eq!(
            vt_from_beta(&derivs(18.0, 18.0, ScalingScope::TScaling), &p).unwrap(),
            6.0
        );
        assert_eq!(
            vt_from_beta(&derivs(0.0, 0.0, ScalingScope::TScaling), &p).unwrap(),
            0.0
        );
        assert!(vt_from_beta(&derivs(1.0, 0.0, ScalingScope::XScaling), &p).is_err());
        let d = beta_derivative_fd(&Analytic::T2, &p, ScalingScope::TScaling, 1e-4).unwrap();
        assert!(close(d.v_beta, 18.0, 1e-9));
    }

    #[test]
    fn identity_checks_on_examples() {
        let p = ShiftPoint::initial(1.3, 0.7, 1.0).unwrap();
        let r = check_identity(&Analytic::ExpXy, &p, IdentityId::Eq1, 1e-6, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_identity(&Analytic::ExpXy, &p, IdentityId::Eq9, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
        let unit = ShiftPoint::initial(1.0, 1.0, 1.0).unwrap();
        let r = check_identity(&Analytic::XPlusY2, &unit, IdentityId::Eq9, 1e-5, 1e-4).unwrap();
        assert!(!r.pass && r.residual > 1e-2, "{r:?}");
        assert!(r.alt_residual > 1e-2);
    }

    #[test]
    fn reversed_second_derivative_ratio_fails_off_unit_x() {
        let p = ShiftPoint::initial(2.0, 0.5, 1.0).unwrap();
        let r = check_identity(&Analytic::X2, &p, IdentityId::Eq2, 1e-6, 1e-4).unwrap();
        assert!(r.pass);
        assert!(r.alt_residual > 1.0);
    }

    #[test]
    fn identities_hold_away_from_unit_shift_in_own_scope() {
        let p = ShiftPoint::new(1.4, 0.8, 1.2, 0.9).unwrap();
        for id in [
            IdentityId::Eq1,
            IdentityId::Eq2,
            IdentityId::Eq3,
            IdentityId::Eq4,
            IdentityId::Eq5,
            IdentityId::Vt,
        ] {
            let r = check_identity(&Analytic::T2ExpXy, &p, id, 1e-6, 1e-4).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn bad_tolerance_rejected() {
        let p = ShiftPoint::initial(1.0, 1.0, 1.0).unwrap();
        assert!(check_identity(&Analytic::Xy, &p, IdentityId::Eq1, 0.0, 1e-4).is_err());
    }
}
