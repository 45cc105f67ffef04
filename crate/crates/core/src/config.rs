//! JSON run configuration.
//!
//! One file per run. Unknown keys are rejected everywhere; physical
//! parameters are range-checked when the file is parsed or in
//! [`RunConfig::validate_for`], before any computation starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::Analytic;
use crate::error::{Error, Result};
use crate::hjb::SolverConfig;
use crate::mc::SimConfig;
use crate::model::{GridSpec, MarketModel, Utility};
use crate::reduction::CouplingOptions;
use crate::shift::IdentityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckIdentities,
    SolveFd,
    ReduceOde,
    Simulate,
    Compare,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::CheckIdentities => "check-identities",
            Command::SolveFd => "solve-fd",
            Command::ReduceOde => "reduce-ode",
            Command::Simulate => "simulate",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    MertonPower,
    MertonExponential,
    Fd,
    Paper,
    Zero,
}

impl PolicyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyName::MertonPower => "merton_power",
            PolicyName::MertonExponential => "merton_exponential",
            PolicyName::Fd => "fd",
            PolicyName::Paper => "paper",
            PolicyName::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectFail {
    pub identity: IdentityId,
    pub function: Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentitiesConfig {
    pub functions: Vec<Analytic>,
    pub identities: Vec<IdentityId>,
    /// Points are the product `xs × ys` at time `t`.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub t: f64,
    pub beta: f64,
    pub h: f64,
    pub tolerance: f64,
    /// Combinations that must fail; passing one is exit code 4.
    pub expect_fail: Vec<ExpectFail>,
}

impl Default for IdentitiesConfig {
    fn default() -> Self {
        let grid = vec![0.6, 0.8, 1.0, 1.2, 1.4];
        let mut identities = IdentityId::SCOPE_LOCAL.to_vec();
        identities.push(IdentityId::Eq9);
        let mut functions = Analytic::CORE_SUITE.to_vec();
        for f in Analytic::PRODUCT_FAMILY {
            if !functions.contains(&f) {
                functions.push(f);
            }
        }
        IdentitiesConfig {
            functions,
            identities,
            xs: grid.clone(),
            ys: grid,
            t: 1.0,
            beta: 1.0,
            h: crate::shift::DEFAULT_STEP,
            tolerance: crate::shift::DEFAULT_TOLERANCE,
            expect_fail: vec![ExpectFail {
                identity: IdentityId::Eq9,
                function: Analytic::XPlusY2,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceConfig {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_beta_range")]
    pub beta_range: [f64; 2],
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// W(1); defaults to x·u'(x).
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub coupling: CouplingOptions,
}

fn default_beta_range() -> [f64; 2] {
    [0.5, 2.0]
}

fn default_nodes() -> usize {
    151
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub policy: PolicyName,
    #[serde(default)]
    pub dump_paths: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub policies: Vec<PolicyName>,
    /// Clip range for the closed-form transform policy.
    #[serde(default = "default_paper_bounds")]
    pub paper_bounds: [f64; 2],
}

fn default_paper_bounds() -> [f64; 2] {
    [-50.0, 50.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueCheckConfig {
    /// Sample points `[t, x, y]`.
    pub points: Vec<[f64; 3]>,
    /// Minimum number of non-boundary points with |z| < 3.
    #[serde(default)]
    pub min_pass: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: MarketModel,
    pub utility: Utility,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub identities: IdentitiesConfig,
    #[serde(default)]
    pub reduce: Option<ReduceConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
    #[serde(default)]
    pub value_check: Option<ValueCheckConfig>,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<String>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every block, then what `command` additionally needs.
    pub fn validate_for(&self, command: Command) -> Result<()> {
        self.utility.validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
            self.solver.validate(g)?;
        }
        if let Some(s) = &self.sim {
            s.validate()?;
            if !(s.t0 > 0.0) {
                return Err(invalid("sim: t0 must be > 0"));
            }
            if !(s.t_end > s.t0) {
                return Err(invalid("sim: t_end must exceed t0"));
            }
        }
        if matches!(self.threads, Some(0)) {
            return Err(invalid("threads must be >= 1"));
        }
        self.validate_identities()?;
        if let Some(r) = &self.reduce {
            self.validate_reduce(r)?;
        }
        match command {
            Command::CheckIdentities => Ok(()),
            Command::SolveFd => self.need_grid().map(|_| ()),
            Command::ReduceOde => match &self.reduce {
                Some(_) => Ok(()),
                None => Err(invalid("reduce-ode needs a `reduce` block")),
            },
            Command::Simulate => {
                let sim = self.need_sim()?;
                let block = self
                    .simulate
                    .as_ref()
                    .ok_or_else(|| invalid("simulate needs a `simulate` block"))?;
                self.validate_policy(block.policy, sim)?;
                if let Some(vc) = &self.value_check {
                    let g = self.need_grid()?;
                    if vc.points.is_empty() {
                        return Err(invalid("value_check: no points"));
                    }
                    for p in &vc.points {
                        if !g.contains(p[0], p[1], p[2]) {
                            return Err(invalid(format!(
                                "value_check: point {p:?} is outside the grid"
                            )));
                        }
                    }
                    if let Some(m) = vc.min_pass {
                        if m > vc.points.len() {
                            return Err(invalid("value_check: min_pass exceeds the point count"));
                        }
                    }
                }
                Ok(())
            }
            Command::Compare => {
                let sim = self.need_sim()?;
                let block = self
                    .compare
                    .as_ref()
                    .ok_or_else(|| invalid("compare needs a `compare` block"))?;
                if block.policies.len() < 2 {
                    return Err(invalid("compare: at least two policies"));
                }
                if !(block.paper_bounds[0] < block.paper_bounds[1]) {
                    return Err(invalid("compare: paper_bounds must be increasing"));
                }
                for &p in &block.policies {
                    self.validate_policy(p, sim)?;
                }
                Ok(())
            }
        }
    }

    pub fn need_grid(&self) -> Result<&GridSpec> {
        self.grid
            .as_ref()
            .ok_or_else(|| invalid("this command needs a `grid` block"))
    }

    pub fn need_sim(&self) -> Result<&SimConfig> {
        self.sim
            .as_ref()
            .ok_or_else(|| invalid("this command needs a `sim` block"))
    }

    fn validate_policy(&self, p: PolicyName, sim: &SimConfig) -> Result<()> {
        match (p, &self.utility) {
            (PolicyName::MertonPower, Utility::Exponential { .. }) => {
                Err(invalid("merton_power needs power or log utility"))
            }
            (PolicyName::MertonExponential, u) if !matches!(u, Utility::Exponential { .. }) => {
                Err(invalid("merton_exponential needs exponential utility"))
            }
            (PolicyName::Fd, _) => {
                let g = self.need_grid()?;
                if (g.t_end - sim.t_end).abs() > 1e-12 {
                    return Err(invalid("fd policy: grid t_end and sim t_end differ"));
                }
                if !g.contains(sim.t0, sim.x0, sim.y0) {
                    return Err(invalid("fd policy: sim start lies outside the grid"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn validate_identities(&self) -> Result<()> {
        let c = &self.identities;
        if c.functions.is_empty() || c.identities.is_empty() {
            return Err(invalid(
                "identities: functions and identities must be non-empty",
            ));
        }
        if c.xs.is_empty() || c.ys.is_empty() {
            return Err(invalid("identities: xs and ys must be non-empty"));
        }
        for &v in c.xs.iter().chain(&c.ys) {
            finite("identities point coordinate", v)?;
        }
        if !(c.t > 0.0 && c.beta > 0.0) {
            return Err(invalid("identities: t and beta must be > 0"));
        }
        if !(c.h > 0.0 && c.h <= 0.1) {
            return Err(invalid("identities: h must be in (0, 0.1]"));
        }
        if !(c.tolerance > 0.0) {
            return Err(invalid("identities: tolerance must be > 0"));
        }
        Ok(())
    }

    fn validate_reduce(&self, r: &ReduceConfig) -> Result<()> {
        if !(r.t > 0.0) {
            return Err(invalid("reduce: t must be > 0"));
        }
        finite("reduce: x", r.x)?;
        finite("reduce: y", r.y)?;
        if r.x == 0.0 || r.y == 0.0 {
            return Err(invalid("reduce: x and y must be nonzero"));
        }
        let [lo, hi] = r.beta_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(invalid("reduce: beta_range must satisfy 0 < lo < hi"));
        }
        if r.nodes < 2 {
            return Err(invalid("reduce: nodes must be >= 2"));
        }
        if let Some(c) = r.c {
            if c == 0.0 || !c.is_finite() {
                return Err(invalid("reduce: c must be finite and nonzero"));
            }
        }
        if r.coupling.max_iter == 0 || !(r.coupling.rel_tol > 0.0) {
            return Err(invalid(
                "reduce: coupling needs max_iter >= 1 and rel_tol > 0",
            ));
        }
        Ok(())
    }
}
