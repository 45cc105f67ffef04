//! Numerical laboratory for the shift-parameter transform of the
//! stochastic-factor portfolio HJB equation.
//!
//! * [`shift`]: β-derivative identities and their finite-difference checker
//! * [`reduction`]: the transformed equation as an ODE in β, and the
//!   closed-form portfolio
//! * [`hjb`]: classical finite-difference HJB solver (independent oracle)
//! * [`mc`]: Monte Carlo evaluation of arbitrary policies
//! * [`cli`]: configuration, command dispatch and artifact files

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod config;
pub mod error;
pub mod hjb;
pub mod mc;
pub mod model;
pub mod quad;
pub mod reduction;
pub mod shift;

pub use error::{Error, Result};
pub use model::{
    CoefficientFamily, Coefficients, GridSpec, MarketModel, PolicyField, Utility, ValueSurface,
};
