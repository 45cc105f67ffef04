//! Market, utility and grid data model shared by the solvers.
//!
//! Everything here is immutable once constructed. Coefficient functions are
//! limited to three families (constant, clamped affine, tabulated with linear
//! interpolation) so that boundedness and the volatility floor can be checked
//! up front instead of trusted.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduction::PaperRule;

/// Market coefficient values at one factor level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub b: f64,
}

impl Coefficients {
    pub fn excess_return(&self) -> f64 {
        self.mu - self.r
    }
}

/// `intercept + slope * y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub intercept: f64,
    pub slope: f64,
}

impl Affine {
    fn at(&self, y: f64) -> f64 {
        self.intercept + self.slope * y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientFamily {
    Constant {
        r: f64,
        mu: f64,
        sigma: f64,
        b: f64,
    },
    /// Affine in y, with y clamped to `clamp` before evaluation.
    Affine {
        r: Affine,
        mu: Affine,
        sigma: Affine,
        b: Affine,
        clamp: [f64; 2],
    },
    /// Piecewise-linear table over strictly increasing nodes `y`.
    Table {
        y: Vec<f64>,
        r: Vec<f64>,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketModelRaw {
    coefficients: CoefficientFamily,
    rho: f64,
    #[serde(default = "default_sigma_min")]
    sigma_min: f64,
}

fn default_sigma_min() -> f64 {
    1e-3
}

/// Coefficients r, mu, sigma, b of the factor model plus the correlation
/// between the asset and factor noises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarketModelRaw", into = "MarketModelRaw")]
pub struct MarketModel {
    family: CoefficientFamily,
    rho: f64,
    sigma_min: f64,
}

impl TryFrom<MarketModelRaw> for MarketModel {
    type Error = Error;

    fn try_from(raw: MarketModelRaw) -> Result<Self> {
        MarketModel::new(raw.coefficients, raw.rho, raw.sigma_min)
    }
}

impl From<MarketModel> for MarketModelRaw {
    fn from(m: MarketModel) -> Self {
        MarketModelRaw {
            coefficients: m.family,
            rho: m.rho,
            sigma_min: m.sigma_min,
        }
    }
}

impl MarketModel {
    pub fn new(family: CoefficientFamily, rho: f64, sigma_min: f64) -> Result<Self> {
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(Error::Validation(format!("|rho| must be < 1, got {rho}")));
        }
        if !(sigma_min.is_finite() && sigma_min > 0.0) {
            return Err(Error::Validation(format!(
                "sigma_min must be positive, got {sigma_min}"
            )));
        }
        let check_sigma = |s: f64| -> Result<()> {
            if s.is_finite() && s >= sigma_min {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "sigma = {s} falls below sigma_min = {sigma_min}"
                )))
            }
        };
        match &family {
            CoefficientFamily::Constant { r, mu, sigma, b } => {
                finite_all("constant coefficients", &[*r, *mu, *b])?;
                check_sigma(*sigma)?;
            }
            CoefficientFamily::Affine {
                r,
                mu,
                sigma,
                b,
                clamp,
            } => {
                finite_all(
                    "affine coefficients",
                    &[
                        r.intercept,
                        r.slope,
                        mu.intercept,
                        mu.slope,
                        b.intercept,
                        b.slope,
                        clamp[0],
                        clamp[1],
                    ],
                )?;
                if clamp[0] >= clamp[1] {
                    return Err(Error::Validation(format!(
                        "affine clamp interval [{}, {}] is empty",
                        clamp[0], clamp[1]
                    )));
                }
                // affine: the minimum over the clamp interval sits at an endpoint
                check_sigma(sigma.at(clamp[0]))?;
                check_sigma(sigma.at(clamp[1]))?;
            }
            CoefficientFamily::Table { y, r, mu, sigma, b } => {
                let n = y.len();
                if n < 2 {
                    return Err(Error::Validation("table needs at least two nodes".into()));
                }
                if [r.len(), mu.len(), sigma.len(), b.len()]
                    .iter()
                    .any(|&l| l != n)
                {
                    return Err(Error::Validation(
                        "table columns must all have the same length as y".into(),
                    ));
                }
                finite_all("table y", y)?;
                finite_all("table r", r)?;
                finite_all("table mu", mu)?;
                finite_all("table b", b)?;
                if y.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Validation(
                        "table nodes must be strictly increasing".into(),
                    ));
                }
                for &s in sigma {
                    check_sigma(s)?;
                }
            }
        }
        Ok(MarketModel {
            family,
            rho,
            sigma_min,
        })
    }

    pub fn constant(r: f64, mu: f64, sigma: f64, b: f64, rho: f64) -> Result<Self> {
        Self::new(
            CoefficientFamily::Constant { r, mu, sigma, b },
            rho,
            default_sigma_min(),
        )
    }

    pub fn family(&self) -> &CoefficientFamily {
        &self.family
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    /// True when no coefficient depends on y.
    pub fn is_constant(&self) -> bool {
        matches!(self.family, CoefficientFamily::Constant { .. })
    }

    /// Coefficient values at factor level `y`.
    ///
    /// Table models reject `y` outside the tabulated range.
    pub fn eval_coefficients(&self, y: f64) -> Result<Coefficients> {
        if !y.is_finite() {
            return Err(Error::Domain {
                what: "factor level y",
                value: y,
            });
        }
        if let CoefficientFamily::Table { y: nodes, .. } = &self.family {
            if y < nodes[0] || y > nodes[nodes.len() - 1] {
                return Err(Error::Domain {
                    what: "factor level y",
                    value: y,
                });
            }
        }
        Ok(self.coefficients_clamped(y))
    }

    /// Like [`eval_coefficients`](Self::eval_coefficients) but table lookups
    /// saturate at the end nodes instead of failing. Used along simulated
    /// paths, which are not confined to the table.
    pub fn coefficients_clamped(&self, y: f64) -> Coefficients {
        match &self.family {
            CoefficientFamily::Constant { r, mu, sigma, b } => Coefficients {
                r: *r,
                mu: *mu,
                sigma: *sigma,
                b: *b,
            },
            CoefficientFamily::Affine {
                r,
                mu,
                sigma,
                b,
                clamp,
            } => {
                let yc = y.clamp(clamp[0], clamp[1]);
                Coefficients {
                    r: r.at(yc),
                    mu: mu.at(yc),
                    sigma: sigma.at(yc),
                    b: b.at(yc),
                }
            }
            CoefficientFamily::Table {
                y: nodes,
                r,
                mu,
                sigma,
                b,
            } => {
                let yc = y.clamp(nodes[0], nodes[nodes.len() - 1]);
                // last index with nodes[k] <= yc, capped so k + 1 is valid
                let k = nodes
                    .partition_point(|&v| v <= yc)
                    .saturating_sub(1)
                    .min(nodes.len() - 2);
                let w = (yc - nodes[k]) / (nodes[k + 1] - nodes[k]);
                let lerp = |col: &[f64]| col[k] + w * (col[k + 1] - col[k]);
                Coefficients {
                    r: lerp(r),
                    mu: lerp(mu),
                    sigma: lerp(sigma),
                    b: lerp(b),
                }
            }
        }
    }
}

fn finite_all(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} must be finite")))
    }
}

/// `(u, u', u'')` at one wealth level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityValue {
    pub u: f64,
    pub du: f64,
    pub d2u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Utility {
    /// `-exp(-alpha x)`
    Exponential { alpha: f64 },
    /// `x^gamma / gamma`, gamma in (0, 1)
    Power { gamma: f64 },
    /// `ln x`
    Log,
}

impl Utility {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Utility::Exponential { alpha } if !(alpha.is_finite() && alpha > 0.0) => Err(
                Error::Validation(format!("exponential utility needs alpha > 0, got {alpha}")),
            ),
            Utility::Power { gamma } if !(gamma > 0.0 && gamma < 1.0) => Err(Error::Validation(
                format!("power utility needs gamma in (0, 1), got {gamma}"),
            )),
            _ => Ok(()),
        }
    }

    /// Power and log utilities are only defined for positive wealth.
    pub fn requires_positive_wealth(&self) -> bool {
        !matches!(self, Utility::Exponential { .. })
    }

    pub fn eval(&self, x: f64) -> Result<UtilityValue> {
        if !x.is_finite() || (self.requires_positive_wealth() && x <= 0.0) {
            return Err(Error::Domain {
                what: "wealth x",
                value: x,
            });
        }
        Ok(match *self {
            Utility::Exponential { alpha } => {
                let e = (-alpha * x).exp();
                UtilityValue {
                    u: -e,
                    du: alpha * e,
                    d2u: -alpha * alpha * e,
                }
            }
            Utility::Power { gamma } => {
                let p = x.powf(gamma);
                UtilityValue {
                    u: p / gamma,
                    du: p / x,
                    d2u: (gamma - 1.0) * p / (x * x),
                }
            }
            Utility::Log => UtilityValue {
                u: x.ln(),
                du: 1.0 / x,
                d2u: -1.0 / (x * x),
            },
        })
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        self.eval(x).map(|v| v.u)
    }
}

/// Uniform tensor grid over (t, x, y).
///
/// `nt` counts time steps, so a surface holds `nt + 1` time slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t0: f64,
    pub t_end: f64,
    pub nt: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Validation(format!("grid: {msg}")))
            }
        };
        ok(self.t0.is_finite() && self.t0 > 0.0, "t0 must be > 0")?;
        ok(
            self.t_end.is_finite() && self.t_end > self.t0,
            "t_end must exceed t0",
        )?;
        ok(
            self.x_min.is_finite() && self.x_min > 0.0,
            "x_min must be > 0",
        )?;
        ok(
            self.x_max.is_finite() && self.x_max > self.x_min,
            "x_max must exceed x_min",
        )?;
        ok(
            self.y_min.is_finite() && self.y_max.is_finite() && self.y_max > self.y_min,
            "y_max must exceed y_min",
        )?;
        ok(
            self.nt >= 4 && self.nx >= 4 && self.ny >= 4,
            "nt, nx and ny must all be >= 4",
        )
    }

    /// Factor band `y0 ± 5 sqrt(horizon)` for a unit-diffusion factor.
    pub fn factor_domain(y0: f64, horizon: f64) -> (f64, f64) {
        let half = 5.0 * horizon.sqrt();
        (y0 - half, y0 + half)
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.nt as f64
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / (self.ny - 1) as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.nt {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.nx - 1 {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn y(&self, j: usize) -> f64 {
        if j == self.ny - 1 {
            self.y_max
        } else {
            self.y_min + j as f64 * self.dy()
        }
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        (self.nt + 1) * self.slice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.nx + i) * self.ny + j
    }

    pub fn contains(&self, t: f64, x: f64, y: f64) -> bool {
        (self.t0..=self.t_end).contains(&t)
            && (self.x_min..=self.x_max).contains(&x)
            && (self.y_min..=self.y_max).contains(&y)
    }
}

/// Position of `v` on a uniform axis: lower node index and weight of the
/// upper node. Values within 1e-12 of a node snap onto it so that node
/// queries are exact.
fn locate(v: f64, lo: f64, step: f64, n: usize) -> (usize, f64) {
    let s = (v - lo) / step;
    let mut k = s.floor();
    let mut w = s - k;
    if w > 1.0 - 1e-12 {
        k += 1.0;
        w = 0.0;
    } else if w < 1e-12 {
        w = 0.0;
    }
    let k = k.max(0.0) as usize;
    if k >= n - 1 {
        // last node is the upper end of the last cell
        return (n - 2, 1.0);
    }
    (k, w)
}

/// A real field sampled on every node of a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    grid: GridSpec,
    values: Vec<f64>,
    producer: String,
}

impl ValueSurface {
    pub fn new(grid: GridSpec, values: Vec<f64>, producer: impl Into<String>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Precondition(format!(
                "surface needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(ValueSurface {
            grid,
            values,
            producer: producer.into(),
        })
    }

    /// Surface whose value at every node is `f(t, x, y)`.
    pub fn from_fn(
        grid: GridSpec,
        producer: impl Into<String>,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for k in 0..=grid.nt {
            for i in 0..grid.nx {
                for j in 0..grid.ny {
                    values.push(f(grid.t(k), grid.x(i), grid.y(j)));
                }
            }
        }
        ValueSurface {
            grid,
            values,
            producer: producer.into(),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn producer(&self) -> &str {
        &self.producer
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(k, i, j)]
    }

    /// The `nx * ny` values of time slice `k`, x-major.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    /// Trilinear interpolation; exact at nodes.
    pub fn interpolate(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        if !self.grid.contains(t, x, y) {
            return Err(Error::OutOfBounds { t, x, y });
        }
        Ok(self.trilinear(t, x, y))
    }

    /// Trilinear interpolation with the query clamped into the box. The flag
    /// reports whether clamping happened.
    pub fn interpolate_clamped(&self, t: f64, x: f64, y: f64) -> (f64, bool) {
        let g = &self.grid;
        let tc = t.clamp(g.t0, g.t_end);
        let xc = x.clamp(g.x_min, g.x_max);
        let yc = y.clamp(g.y_min, g.y_max);
        let clamped = tc != t || xc != x || yc != y;
        (self.trilinear(tc, xc, yc), clamped)
    }

    fn trilinear(&self, t: f64, x: f64, y: f64) -> f64 {
        let g = &self.grid;
        let (k, wt) = locate(t, g.t0, g.dt(), g.nt + 1);
        let (i, wx) = locate(x, g.x_min, g.dx(), g.nx);
        let (j, wy) = locate(y, g.y_min, g.dy(), g.ny);
        let mut acc = 0.0;
        for (dk, ft) in [(0, 1.0 - wt), (1, wt)] {
            if ft == 0.0 {
                continue;
            }
            for (di, fx) in [(0, 1.0 - wx), (1, wx)] {
                if fx == 0.0 {
                    continue;
                }
                for (dj, fy) in [(0, 1.0 - wy), (1, wy)] {
                    if fy == 0.0 {
                        continue;
                    }
                    acc += ft * fx * fy * self.get(k + dk, i + di, j + dj);
                }
            }
        }
        acc
    }

    /// CSV with header `t,x,y,value`, row-major in (t, x, y).
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        self.write_csv_column(out, "value")
    }

    /// As [`write_csv`](Self::write_csv) with a custom last column name.
    pub fn write_csv_column<W: Write>(&self, mut out: W, column: &str) -> std::io::Result<()> {
        writeln!(out, "t,x,y,{column}")?;
        let g = &self.grid;
        for k in 0..=g.nt {
            for i in 0..g.nx {
                for j in 0..g.ny {
                    writeln!(
                        out,
                        "{:.15e},{:.15e},{:.15e},{:.15e}",
                        g.t(k),
                        g.x(i),
                        g.y(j),
                        self.get(k, i, j)
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// A policy evaluation: amount invested in the risky asset, and whether a
/// grid policy had to clamp the query into its box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyValue {
    pub pi: f64,
    pub clamped: bool,
}

pub type PolicyFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Portfolio rule `(t, x, y) -> pi`, in wealth units.
#[derive(Clone)]
pub enum PolicyField {
    Zero,
    Constant(f64),
    /// `(mu - r) x / (sigma^2 (1 - gamma))`, coefficients read at y.
    MertonPower {
        gamma: f64,
    },
    /// `(mu - r) exp(-r (T - t)) / (alpha sigma^2)`.
    MertonExponential {
        alpha: f64,
        t_end: f64,
    },
    /// The shift-transform closed form, coupled to the reduced ODE.
    Paper(PaperRule),
    /// Grid of pi values, trilinear with clamping outside the box.
    Grid(ValueSurface),
    Custom {
        label: String,
        rule: PolicyFn,
    },
}

impl fmt::Debug for PolicyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PolicyField({})", self.label())
    }
}

impl PolicyField {
    pub fn label(&self) -> String {
        match self {
            PolicyField::Zero => "zero".into(),
            PolicyField::Constant(c) => format!("constant({c})"),
            PolicyField::MertonPower { .. } => "merton_power".into(),
            PolicyField::MertonExponential { .. } => "merton_exponential".into(),
            PolicyField::Paper(_) => "paper".into(),
            PolicyField::Grid(s) => format!("grid:{}", s.producer()),
            PolicyField::Custom { label, .. } => label.clone(),
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, PolicyField::Grid(_))
    }

    pub fn evaluate(&self, model: &MarketModel, t: f64, x: f64, y: f64) -> PolicyValue {
        let closed = |pi: f64| PolicyValue { pi, clamped: false };
        match self {
            PolicyField::Zero => closed(0.0),
            PolicyField::Constant(c) => closed(*c),
            PolicyField::MertonPower { gamma } => {
                let c = model.coefficients_clamped(y);
                closed(c.excess_return() * x / (c.sigma * c.sigma * (1.0 - gamma)))
            }
            PolicyField::MertonExponential { alpha, t_end } => {
                let c = model.coefficients_clamped(y);
                closed(c.excess_return() * (-c.r * (t_end - t)).exp() / (alpha * c.sigma * c.sigma))
            }
            PolicyField::Paper(rule) => closed(rule.evaluate(model, t, x, y)),
            PolicyField::Grid(surface) => {
                let (pi, clamped) = surface.interpolate_clamped(t, x, y);
                PolicyValue { pi, clamped }
            }
            PolicyField::Custom { rule, .. } => closed(rule(t, x, y)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec {
            t0: 0.5,
            t_end: 1.5,
            nt: 4,
            x_min: 0.5,
            x_max: 2.5,
            nx: 5,
            y_min: -1.0,
            y_max: 1.0,
            ny: 5,
        }
    }

    #[test]
    fn constant_family_ignores_y() {
        let m = MarketModel::constant(0.03, 0.10, 0.25, 0.0, 0.0).unwrap();
        let c = m.eval_coefficients(1.7).unwrap();
        assert_eq!(
            c,
            Coefficients {
                r: 0.03,
                mu: 0.10,
                sigma: 0.25,
                b: 0.0
            }
        );
        assert_eq!(m.eval_coefficients(-40.0).unwrap(), c);
    }

    #[test]
    fn affine_family_is_direct_arithmetic() {
        let flat = |v| Affine {
            intercept: v,
            slope: 0.0,
        };
        let m = MarketModel::new(
            CoefficientFamily::Affine {
                r: flat(0.03),
                mu: Affine {
                    intercept: 0.05,
                    slope: 0.02,
                },
                sigma: flat(0.2),
                b: flat(0.0),
                clamp: [-5.0, 5.0],
            },
            0.3,
            1e-3,
        )
        .unwrap();
        let c = m.eval_coefficients(2.0).unwrap();
        assert!((c.mu - 0.09).abs() < 1e-15);
        // clamped beyond the interval
        let hi = m.eval_coefficients(50.0).unwrap();
        assert!((hi.mu - 0.15).abs() < 1e-15);
    }

    fn table() -> MarketModel {
        MarketModel::new(
            CoefficientFamily::Table {
                y: vec![0.0, 1.0, 2.0],
                r: vec![0.01, 0.02, 0.03],
                mu: vec![0.05, 0.08, 0.12],
                sigma: vec![0.2, 0.3, 0.25],
                b: vec![0.1, 0.0, -0.1],
            },
            -0.4,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn table_family_interpolates_and_rejects_outside() {
        let m = table();
        let c = m.eval_coefficients(0.5).unwrap();
        assert!((c.sigma - 0.25).abs() < 1e-15);
        assert!((c.mu - 0.065).abs() < 1e-15);
        assert_eq!(m.eval_coefficients(2.0).unwrap().sigma, 0.25);
        assert!(matches!(
            m.eval_coefficients(-0.1),
            Err(Error::Domain { .. })
        ));
        assert_eq!(
            m.coefficients_clamped(-3.0),
            m.eval_coefficients(0.0).unwrap()
        );
    }

    #[test]
    fn model_validation() {
        assert!(MarketModel::constant(0.0, 0.1, 0.2, 0.0, 1.0).is_err());
        assert!(MarketModel::constant(0.0, 0.1, 0.2, 0.0, -1.5).is_err());
        assert!(MarketModel::new(
            CoefficientFamily::Constant {
                r: 0.0,
                mu: 0.1,
                sigma: 0.01,
                b: 0.0
            },
            0.0,
            0.05
        )
        .is_err());
        let bad_table = CoefficientFamily::Table {
            y: vec![0.0, 0.0],
            r: vec![0.0; 2],
            mu: vec![0.0; 2],
            sigma: vec![0.2; 2],
            b: vec![0.0; 2],
        };
        assert!(MarketModel::new(bad_table, 0.0, 0.01).is_err());
    }

    #[test]
    fn model_json_rejects_unknown_keys() {
        let ok = r#"{"coefficients":{"family":"constant","r":0.03,"mu":0.1,"sigma":0.25,"b":0.0},"rho":0.2}"#;
        let m: MarketModel = serde_json::from_str(ok).unwrap();
        assert_eq!(m.rho(), 0.2);
        let extra = r#"{"coefficients":{"family":"constant","r":0.03,"mu":0.1,"sigma":0.25,"b":0.0,"k":1},"rho":0.2}"#;
        assert!(serde_json::from_str::<MarketModel>(extra).is_err());
        let bad_rho = r#"{"coefficients":{"family":"constant","r":0.03,"mu":0.1,"sigma":0.25,"b":0.0},"rho":1.5}"#;
        assert!(serde_json::from_str::<MarketModel>(bad_rho).is_err());
    }

    #[test]
    fn utility_triples() {
        // u = x^γ/γ: u' = x^(γ-1), u'' = (γ-1) x^(γ-2)
        let p = Utility::Power { gamma: 0.5 }.eval(4.0).unwrap();
        assert_eq!((p.u, p.du, p.d2u), (4.0, 0.5, -0.0625));
        let e = Utility::Exponential { alpha: 1.0 }.eval(0.0).unwrap();
        assert_eq!((e.u, e.du, e.d2u), (-1.0, 1.0, -1.0));
        assert!(Utility::Log.eval(0.0).is_err());
        assert!(Utility::Power { gamma: 0.5 }.eval(-1.0).is_err());
        assert!(Utility::Exponential { alpha: 2.0 }.eval(-3.0).is_ok());
        assert!(Utility::Power { gamma: 1.0 }.validate().is_err());
    }

    #[test]
    fn utility_is_increasing_and_concave() {
        let families = [
            Utility::Exponential { alpha: 1.5 },
            Utility::Power { gamma: 0.3 },
            Utility::Log,
        ];
        let xs: Vec<f64> = (1..60).map(|k| 0.05 * k as f64).collect();
        for u in families {
            for w in xs.windows(2) {
                let (a, b) = (u.eval(w[0]).unwrap(), u.eval(w[1]).unwrap());
                assert!(a.du > 0.0 && a.d2u < 0.0);
                assert!(a.du > b.du, "{u:?} at {}", w[0]);
            }
        }
    }

    #[test]
    fn grid_validation() {
        assert!(grid().validate().is_ok());
        assert!(GridSpec { t0: 0.0, ..grid() }.validate().is_err());
        assert!(GridSpec {
            x_min: 0.0,
            ..grid()
        }
        .validate()
        .is_err());
        assert!(GridSpec { nx: 3, ..grid() }.validate().is_err());
        assert!(GridSpec {
            t_end: 0.4,
            ..grid()
        }
        .validate()
        .is_err());
        assert_eq!(GridSpec::factor_domain(1.0, 4.0), (-9.0, 11.0));
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let g = grid();
        let s = ValueSurface::from_fn(g, "test", |t, x, y| (t * 3.1).sin() + x * x * y + y.exp());
        for k in 0..=g.nt {
            for i in 0..g.nx {
                for j in 0..g.ny {
                    let v = s.interpolate(g.t(k), g.x(i), g.y(j)).unwrap();
                    assert_eq!(v, s.get(k, i, j));
                }
            }
        }
    }

    #[test]
    fn interpolation_of_linear_data_is_linear() {
        let g = grid();
        let s = ValueSurface::from_fn(g, "lin", |t, x, y| 2.0 * t - 3.0 * x + 0.5 * y);
        let mid = s
            .interpolate(g.t(1), 0.5 * (g.x(1) + g.x(2)), g.y(3))
            .unwrap();
        let mean = 0.5 * (s.get(1, 1, 3) + s.get(1, 2, 3));
        assert!((mid - mean).abs() < 1e-14);
        let v = s.interpolate(0.77, 1.31, -0.42).unwrap();
        assert!((v - (2.0 * 0.77 - 3.0 * 1.31 + 0.5 * -0.42)).abs() < 1e-13);
    }

    #[test]
    fn interpolation_out_of_box() {
        let s = ValueSurface::from_fn(grid(), "c", |_, _, _| 1.0);
        assert!(matches!(
            s.interpolate(1.0, 3.0, 0.0),
            Err(Error::OutOfBounds { .. })
        ));
        let (v, clamped) = s.interpolate_clamped(1.0, 3.0, 0.0);
        assert!(clamped);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn csv_header_and_rows() {
        let s = ValueSurface::from_fn(grid(), "c", |t, x, y| t + x + y);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x,y,value"));
        let first: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|f| f.parse().unwrap())
            .collect();
        assert_eq!(first, vec![0.5, 0.5, -1.0, 0.0]);
        assert_eq!(text.lines().count(), 1 + grid().len());
    }
}
