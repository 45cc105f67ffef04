//! Named smooth test functions for exercising the derivative identities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A scalar field V(t, x, y).
pub trait TestFunction: Send + Sync {
    fn name(&self) -> String;
    fn eval(&self, t: f64, x: f64, y: f64) -> f64;
}

/// Adapter for closures.
pub struct FnTest<F> {
    pub name: String,
    pub f: F,
}

impl<F> FnTest<F>
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnTest {
            name: name.into(),
            f,
        }
    }
}

impl<F> TestFunction for FnTest<F>
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        (self.f)(t, x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analytic {
    /// x^2
    X2,
    /// x y
    Xy,
    /// exp(x y)
    ExpXy,
    /// x + y^2
    XPlusY2,
    /// sin(x) cos(y)
    SinXCosY,
    /// (x y)^3
    XyCubed,
    /// sin(x y)
    SinXy,
    /// ln(1 + x y)
    Log1pXy,
    /// t^2
    T2,
    /// t^2 exp(x y)
    T2ExpXy,
    /// exp(-t) sin(x) cos(y)
    DecaySinCos,
}

impl Analytic {
    pub const ALL: [Analytic; 11] = [
        Analytic::X2,
        Analytic::Xy,
        Analytic::ExpXy,
        Analytic::XPlusY2,
        Analytic::SinXCosY,
        Analytic::XyCubed,
        Analytic::SinXy,
        Analytic::Log1pXy,
        Analytic::T2,
        Analytic::T2ExpXy,
        Analytic::DecaySinCos,
    ];

    /// The five-member suite used for the scope-local identities.
    pub const CORE_SUITE: [Analytic; 5] = [
        Analytic::X2,
        Analytic::Xy,
        Analytic::ExpXy,
        Analytic::XPlusY2,
        Analytic::SinXCosY,
    ];

    /// Functions that depend on t, for the time-scaling identity.
    pub const TIMED: [Analytic; 3] = [Analytic::T2, Analytic::T2ExpXy, Analytic::DecaySinCos];

    /// Functions of the product x y only.
    pub const PRODUCT_FAMILY: [Analytic; 5] = [
        Analytic::Xy,
        Analytic::ExpXy,
        Analytic::XyCubed,
        Analytic::SinXy,
        Analytic::Log1pXy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Analytic::X2 => "x2",
            Analytic::Xy => "xy",
            Analytic::ExpXy => "exp_xy",
            Analytic::XPlusY2 => "x_plus_y2",
            Analytic::SinXCosY => "sin_x_cos_y",
            Analytic::XyCubed => "xy_cubed",
            Analytic::SinXy => "sin_xy",
            Analytic::Log1pXy => "log1p_xy",
            Analytic::T2 => "t2",
            Analytic::T2ExpXy => "t2_exp_xy",
            Analytic::DecaySinCos => "decay_sin_cos",
        }
    }

    /// Whether V depends on (x, y) only through x y.
    pub fn is_product_form(&self) -> bool {
        Self::PRODUCT_FAMILY.contains(self)
    }
}

impl fmt::Display for Analytic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Analytic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Analytic::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown test function '{s}'"))
    }
}

impl TestFunction for Analytic {
    fn name(&self) -> String {
        self.as_str().to_string()
    }

    fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        match self {
            Analytic::X2 => x * x,
            Analytic::Xy => x * y,
            Analytic::ExpXy => (x * y).exp(),
            Analytic::XPlusY2 => x + y * y,
            Analytic::SinXCosY => x.sin() * y.cos(),
            Analytic::XyCubed => (x * y).powi(3),
            Analytic::SinXy => (x * y).sin(),
            Analytic::Log1pXy => (x * y).ln_1p(),
            Analytic::T2 => t * t,
            Analytic::T2ExpXy => t * t * (x * y).exp(),
            Analytic::DecaySinCos => (-t).exp() * x.sin() * y.cos(),
        }
    }
}
