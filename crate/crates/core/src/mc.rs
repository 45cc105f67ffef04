//! Euler–Maruyama simulation of the wealth/factor system under a policy.
//!
//! ```text
//! dX = [r X + (μ − r) π] ds + π σ dW¹
//! dY = b ds + ρ dW¹ + √(1 − ρ²) dW²
//! ```
//!
//! Coefficients are read at the current Y (table models saturate at their
//! end nodes). Each path, or antithetic pair of paths, draws from its own
//! ChaCha stream keyed by `(seed, index)`, so results do not depend on how
//! work is split across threads; sums are reduced in a fixed order.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{extract_policy, HjbSolution};
use crate::model::{MarketModel, PolicyField, Utility};

/// Largest per-path dump accepted, in rows.
pub const MAX_DUMP_ROWS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub antithetic: bool,
    pub t0: f64,
    pub x0: f64,
    pub y0: f64,
    pub t_end: f64,
    /// Absorbing level for utilities defined only on positive wealth.
    #[serde(default = "default_floor")]
    pub x_floor: f64,
}

fn default_true() -> bool {
    true
}

fn default_floor() -> f64 {
    1e-6
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 100 {
            return Err(Error::Validation(format!(
                "paths must be >= 100, got {}",
                self.paths
            )));
        }
        if self.steps < 16 {
            return Err(Error::Validation(format!(
                "steps must be >= 16, got {}",
                self.steps
            )));
        }
        if self.antithetic && !self.paths.is_multiple_of(2) {
            return Err(Error::Validation(
                "antithetic sampling needs an even path count".into(),
            ));
        }
        if !(self.t_end >= self.t0) || !self.t0.is_finite() || !self.t_end.is_finite() {
            return Err(Error::Validation(format!(
                "horizon [{}, {}] is not a finite forward interval",
                self.t0, self.t_end
            )));
        }
        if !self.x0.is_finite() || !self.y0.is_finite() {
            return Err(Error::Validation("initial state must be finite".into()));
        }
        if !(self.x_floor > 0.0) {
            return Err(Error::Validation("x_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Independent sampling units: antithetic pairs, or single paths.
    fn units(&self) -> usize {
        if self.antithetic {
            self.paths / 2
        } else {
            self.paths
        }
    }

    fn start_at(&self, t: f64, x: f64, y: f64) -> SimConfig {
        SimConfig {
            t0: t,
            x0: x,
            y0: y,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub mean_terminal_wealth: f64,
    pub var_terminal_wealth: f64,
    pub bankruptcies: usize,
    /// Policy queries that fell outside a grid policy's box.
    pub clamped_queries: usize,
    pub paths: usize,
    pub steps: usize,
}

/// One sampling unit: payoff (averaged over an antithetic pair) and the
/// per-path terminal wealth moments.
#[derive(Debug, Clone, Copy, Default)]
struct UnitResult {
    payoff: f64,
    wealth_sum: f64,
    wealth_sq_sum: f64,
    bankruptcies: usize,
    clamped: usize,
}

struct PathEnd {
    x: f64,
    payoff: f64,
    bankrupt: bool,
    clamped: usize,
}

fn stream(seed: u64, unit: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(unit as u64);
    rng
}

fn normals(seed: u64, unit: usize, steps: usize) -> Vec<[f64; 2]> {
    let mut rng = stream(seed, unit);
    (0..steps)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [a, b]
        })
        .collect()
}

/// Runs one path from the config's initial state. `sign` flips the normals.
fn run_path(
    model: &MarketModel,
    policy: &PolicyField,
    utility: &Utility,
    cfg: &SimConfig,
    z: &[[f64; 2]],
    sign: f64,
    mut record: Option<&mut dyn FnMut(usize, f64, f64, f64, f64)>,
) -> Result<PathEnd> {
    let absorbing = utility.requires_positive_wealth();
    let dt = (cfg.t_end - cfg.t0) / cfg.steps as f64;
    let sq = dt.sqrt();
    let rho = model.rho();
    let rho_c = (1.0 - rho * rho).sqrt();
    let (mut x, mut y) = (cfg.x0, cfg.y0);
    let mut clamped = 0;
    if absorbing && x <= cfg.x_floor {
        return Ok(PathEnd {
            x: cfg.x_floor,
            payoff: utility.value(cfg.x_floor)?,
            bankrupt: true,
            clamped,
        });
    }
    for (n, w) in z.iter().enumerate() {
        let t = cfg.t0 + n as f64 * dt;
        let c = model.coefficients_clamped(y);
        let p = policy.evaluate(model, t, x, y);
        clamped += p.clamped as usize;
        if let Some(rec) = record.as_deref_mut() {
            rec(n, t, x, y, p.pi);
        }
        let (dw1, dw2) = (sign * w[0] * sq, sign * w[1] * sq);
        x += (c.r * x + c.excess_return() * p.pi) * dt + p.pi * c.sigma * dw1;
        y += c.b * dt + rho * dw1 + rho_c * dw2;
        if absorbing && x <= cfg.x_floor {
            return Ok(PathEnd {
                x: cfg.x_floor,
                payoff: utility.value(cfg.x_floor)?,
                bankrupt: true,
                clamped,
            });
        }
    }
    if let Some(rec) = record {
        rec(cfg.steps, cfg.t_end, x, y, f64::NAN);
    }
    Ok(PathEnd {
        x,
        payoff: utility.value(x)?,
        bankrupt: false,
        clamped,
    })
}

fn run_unit(
    model: &MarketModel,
    policy: &PolicyField,
    utility: &Utility,
    cfg: &SimConfig,
    unit: usize,
) -> Result<UnitResult> {
    let z = normals(cfg.seed, unit, cfg.steps);
    let signs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
    let mut out = UnitResult::default();
    for &s in signs {
        let end = run_path(model, policy, utility, cfg, &z, s, None)?;
        out.payoff += end.payoff / signs.len() as f64;
        out.wealth_sum += end.x;
        out.wealth_sq_sum += end.x * end.x;
        out.bankruptcies += end.bankrupt as usize;
        out.clamped += end.clamped;
    }
    Ok(out)
}

/// Fixed-order pairwise sum.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1..=8 => v.iter().sum(),
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = if v.len() > 1 {
        pairwise_sum(&dev) / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

fn units(
    model: &MarketModel,
    policy: &PolicyField,
    utility: &Utility,
    cfg: &SimConfig,
) -> Result<Vec<UnitResult>> {
    (0..cfg.units())
        .into_par_iter()
        .map(|u| run_unit(model, policy, utility, cfg, u))
        .collect()
}

fn report(label: String, cfg: &SimConfig, results: &[UnitResult]) -> SimReport {
    let payoffs: Vec<f64> = results.iter().map(|r| r.payoff).collect();
    let (estimate, std_error) = mean_se(&payoffs);
    let n = cfg.paths as f64;
    let ws: Vec<f64> = results.iter().map(|r| r.wealth_sum).collect();
    let wq: Vec<f64> = results.iter().map(|r| r.wealth_sq_sum).collect();
    let mean_w = pairwise_sum(&ws) / n;
    let var_w = ((pairwise_sum(&wq) - n * mean_w * mean_w) / (n - 1.0)).max(0.0);
    SimReport {
        label,
        estimate,
        std_error,
        mean_terminal_wealth: mean_w,
        var_terminal_wealth: var_w,
        bankruptcies: results.iter().map(|r| r.bankruptcies).sum(),
        clamped_queries: results.iter().map(|r| r.clamped).sum(),
        paths: cfg.paths,
        steps: cfg.steps,
    }
}

fn check_start(utility: &Utility, cfg: &SimConfig) -> Result<()> {
    cfg.validate()?;
    utility.validate()?;
    if utility.requires_positive_wealth() && cfg.x0 <= 0.0 {
        return Err(Error::Domain {
            what: "initial wealth",
            value: cfg.x0,
        });
    }
    Ok(())
}

/// Monte Carlo estimate of E[u(X_T)] under `policy`.
pub fn simulate_paths(
    model: &MarketModel,
    policy: &PolicyField,
    utility: &Utility,
    cfg: &SimConfig,
) -> Result<SimReport> {
    check_start(utility, cfg)?;
    let results = units(model, policy, utility, cfg)?;
    Ok(report(policy.label(), cfg, &results))
}

/// Writes `path,step,t,X,Y,pi` rows; the terminal row has an empty pi.
pub fn dump_paths<W: Write>(
    model: &MarketModel,
    policy: &PolicyField,
    utility: &Utility,
    cfg: &SimConfig,
    mut out: W,
) -> Result<()> {
    check_start(utility, cfg)?;
    let rows = cfg.paths.saturating_mul(cfg.steps);
    if rows > MAX_DUMP_ROWS {
        return Err(Error::Validation(format!(
            "path dump of {rows} rows exceeds the limit of {MAX_DUMP_ROWS}"
        )));
    }
    writeln!(out, "path,step,t,X,Y,pi")?;
    let signs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
    let mut io: std::io::Result<()> = Ok(());
    for unit in 0..cfg.units() {
        let z = normals(cfg.seed, unit, cfg.steps);
        for (s_idx, &s) in signs.iter().enumerate() {
            let path = unit * signs.len() + s_idx;
            let mut rec = |n: usize, t: f64, x: f64, y: f64, pi: f64| {
                if io.is_ok() {
                    io = if pi.is_nan() {
                        writeln!(out, "{path},{n},{t:.15e},{x:.15e},{y:.15e},")
                    } else {
                        writeln!(out, "{path},{n},{t:.15e},{x:.15e},{y:.15e},{pi:.15e}")
                    };
                }
            };
            run_path(model, policy, utility, cfg, &z, s, Some(&mut rec))?;
        }
    }
    io?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDifference {
    pub first: String,
    pub second: String,
    /// Estimate of E[u(X_T^first)] − E[u(X_T^second)].
    pub difference: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub reports: Vec<SimReport>,
    pub differences: Vec<PairDifference>,
    /// Labels ordered by decreasing estimate.
    pub ranking: Vec<String>,
}

/// Simulates every policy on the same increments and reports pairwise
/// differences with their standard errors.
pub fn compare_policies(
    model: &MarketModel,
    utility: &Utility,
    policies: &[PolicyField],
    cfg: &SimConfig,
) -> Result<ComparisonReport> {
    if policies.len() < 2 {
        return Err(Error::Validation(
            "compare needs at least two policies".into(),
        ));
    }
    check_start(utility, cfg)?;
    let per_policy: Vec<Vec<UnitResult>> = policies
        .iter()
        .map(|p| units(model, p, utility, cfg))
        .collect::<Result<_>>()?;
    let reports: Vec<SimReport> = policies
        .iter()
        .zip(&per_policy)
        .map(|(p, r)| report(p.label(), cfg, r))
        .collect();
    let mut differences = Vec::new();
    for a in 0..policies.len() {
        for b in a + 1..policies.len() {
            let d: Vec<f64> = per_policy[a]
                .iter()
                .zip(&per_policy[b])
                .map(|(x, y)| x.payoff - y.payoff)
                .collect();
            let (difference, std_error) = mean_se(&d);
            differences.push(PairDifference {
                first: reports[a].label.clone(),
                second: reports[b].label.clone(),
                difference,
                std_error,
            });
        }
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .estimate
            .total_cmp(&reports[a].estimate)
            .then(a.cmp(&b))
    });
    Ok(ComparisonReport {
        ranking: order.iter().map(|&i| reports[i].label.clone()).collect(),
        reports,
        differences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueCheckPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v_fd: f64,
    pub v_mc: f64,
    pub std_error: f64,
    /// `(v_fd − v_mc) / std_error`; zero when both sides are exact.
    pub z: f64,
    /// Within the outer fifth of the x range; excluded from pass/fail.
    pub boundary_affected: bool,
}

/// Fraction of the x range, at each end, treated as boundary-affected.
pub const BOUNDARY_BAND: f64 = 0.2;

/// Compares the solved value with a simulation under the solved policy,
/// started at each sample point and run to the grid's terminal time. Point
/// `k` uses seed `seed + k`, so the z-scores are independent.
pub fn value_check(
    model: &MarketModel,
    utility: &Utility,
    solution: &HjbSolution,
    cfg: &SimConfig,
    points: &[(f64, f64, f64)],
) -> Result<Vec<ValueCheckPoint>> {
    let grid = *solution.value.grid();
    let policy = extract_policy(solution);
    let band = BOUNDARY_BAND * (grid.x_max - grid.x_min);
    points
        .iter()
        .enumerate()
        .map(|(idx, &(t, x, y))| {
            if !grid.contains(t, x, y) {
                return Err(Error::OutOfBounds { t, x, y });
            }
            let v_fd = solution.value.interpolate(t, x, y)?;
            let sub = cfg.start_at(t, x, y);
            let sub = SimConfig {
                t_end: grid.t_end,
                seed: cfg.seed.wrapping_add(idx as u64),
                ..sub
            };
            let (v_mc, se) = if t >= grid.t_end {
                (utility.value(x)?, 0.0)
            } else {
                let r = simulate_paths(model, &policy, utility, &sub)?;
                (r.estimate, r.std_error)
            };
            let z = if se > 0.0 {
                (v_fd - v_mc) / se
            } else if v_fd == v_mc {
                0.0
            } else {
                f64::INFINITY.copysign(v_fd - v_mc)
            };
            Ok(ValueCheckPoint {
                t,
                x,
                y,
                v_fd,
                v_mc,
                std_error: se,
                z,
                boundary_affected: x < grid.x_min + band || x > grid.x_max - band,
            })
        })
        .collect()
}
