//! Finite-difference solver for the portfolio HJB equation
//!
//! ```text
//! V_t + r x V_x + b V_y + ½ V_yy
//!     + sup_π { ½ π² σ² V_xx + π (μ − r) V_x + ρ σ π V_xy } = 0,
//! V(T, x, y) = u(x)
//! ```
//!
//! Backward in time with a lagged policy: π* is computed from the
//! derivatives of the slice at t + Δt, then the linear equation for that π*
//! advances V to t. The x-part (drift and diffusion) is implicit, or explicit
//! for [`Scheme::Explicit`]; the y-part and the cross term are always
//! explicit.
//!
//! Stencils: central differences in the interior (drift switches to upwind
//! where the cell Péclet number exceeds one), the four-corner stencil for
//! V_xy, second-order one-sided first derivatives on the y edges. On the x
//! edges the equation is imposed with the curvature closed by extrapolating
//! the relative curvature x V_xx / V_x (see [`EdgeTreatment`]); on the y
//! edges V_yy = 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coefficients, GridSpec, MarketModel, PolicyField, Utility, ValueSurface};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    /// Implicit in x, explicit in y and in the cross term.
    ImplicitX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTreatment {
    /// One-sided second derivative from the two inner neighbours.
    OneSided,
    /// Second derivative set to zero.
    ZeroCurvature,
    /// x V_xx / V_x linearly extrapolated from the two inner nodes and
    /// imposed through a ghost node. Exact for CRRA and CARA profiles.
    CurvatureRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundaries {
    pub x_lo: EdgeTreatment,
    pub x_hi: EdgeTreatment,
    pub y_lo: EdgeTreatment,
    pub y_hi: EdgeTreatment,
}

impl Default for Boundaries {
    fn default() -> Self {
        Boundaries {
            x_lo: EdgeTreatment::CurvatureRatio,
            x_hi: EdgeTreatment::CurvatureRatio,
            y_lo: EdgeTreatment::ZeroCurvature,
            y_hi: EdgeTreatment::ZeroCurvature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// Largest internal time step; each grid interval is split into equal
    /// substeps no longer than this. `None` uses the grid step.
    pub dt: Option<f64>,
    /// Defaults to `[-10 x_max, 10 x_max]`.
    pub pi_bounds: Option<[f64; 2]>,
    pub boundaries: Boundaries,
    pub curvature_floor: f64,
    /// Upper bound on `dt · ½σ²π² / dx²` at the x edges.
    pub edge_diffusion_limit: f64,
    /// Fraction of nodes per stored step whose closed-form argmax is
    /// re-derived by brute force.
    pub spot_check_fraction: f64,
    pub spot_check_cells: usize,
    /// Acceptance bound on the per-step residual, used by the CLI.
    pub max_residual: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::ImplicitX,
            dt: None,
            pi_bounds: None,
            boundaries: Boundaries::default(),
            curvature_floor: 1e-12,
            edge_diffusion_limit: 0.5,
            spot_check_fraction: 0.01,
            spot_check_cells: 20_000,
            max_residual: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Validation(format!(
                    "solver dt must be > 0, got {dt}"
                )));
            }
        }
        let [lo, hi] = self.bounds(grid);
        if !(lo < hi) {
            return Err(Error::Validation(format!(
                "pi bounds [{lo}, {hi}] are empty"
            )));
        }
        if !(self.curvature_floor >= 0.0) {
            return Err(Error::Validation("curvature_floor must be >= 0".into()));
        }
        if !(self.edge_diffusion_limit > 0.0 && self.edge_diffusion_limit < 1.0) {
            return Err(Error::Validation(
                "edge_diffusion_limit must be in (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.spot_check_fraction) || self.spot_check_cells < 2 {
            return Err(Error::Validation("spot check settings out of range".into()));
        }
        Ok(())
    }

    pub fn bounds(&self, grid: &GridSpec) -> [f64; 2] {
        self.pi_bounds
            .unwrap_or([-10.0 * grid.x_max, 10.0 * grid.x_max])
    }

    fn substeps(&self, grid: &GridSpec) -> usize {
        match self.dt {
            Some(dt) => (grid.dt() / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize,
            None => 1,
        }
    }
}

/// `½π²σ²V_xx + π(μ−r)V_x + ρσπV_xy`.
pub fn hamiltonian_term(pi: f64, vx: f64, vxx: f64, vxy: f64, c: &Coefficients, rho: f64) -> f64 {
    0.5 * pi * pi * c.sigma * c.sigma * vxx + pi * c.excess_return() * vx + rho * c.sigma * pi * vxy
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Argmax {
    pub pi: f64,
    /// Bound active, or curvature too flat for an interior maximum.
    pub clipped: bool,
}

/// Maximizer of [`hamiltonian_term`] over `bounds`: the clipped vertex when
/// V_xx < −floor, otherwise the better endpoint (zero wins ties).
pub fn argmax_pi_closed(
    vx: f64,
    vxx: f64,
    vxy: f64,
    c: &Coefficients,
    rho: f64,
    bounds: [f64; 2],
    curvature_floor: f64,
) -> Argmax {
    let [lo, hi] = bounds;
    let linear = c.excess_return() * vx + rho * c.sigma * vxy;
    if vxx < -curvature_floor {
        let vertex = -linear / (c.sigma * c.sigma * vxx);
        let pi = vertex.clamp(lo, hi);
        return Argmax {
            pi,
            clipped: pi != vertex,
        };
    }
    let h = |p: f64| hamiltonian_term(p, vx, vxx, vxy, c, rho);
    let mut best = if (lo..=hi).contains(&0.0) { 0.0 } else { lo };
    for cand in [hi, lo] {
        if h(cand) > h(best) {
            best = cand;
        }
    }
    Argmax {
        pi: best,
        clipped: true,
    }
}

/// Grid-search maximizer over `cells + 1` equally spaced points of `bounds`.
pub fn argmax_pi_brute(
    vx: f64,
    vxx: f64,
    vxy: f64,
    c: &Coefficients,
    rho: f64,
    bounds: [f64; 2],
    cells: usize,
) -> f64 {
    let [lo, hi] = bounds;
    let width = (hi - lo) / cells as f64;
    let mut best = lo;
    let mut best_h = hamiltonian_term(lo, vx, vxx, vxy, c, rho);
    for k in 1..=cells {
        let p = lo + k as f64 * width;
        let h = hamiltonian_term(p, vx, vxx, vxy, c, rho);
        if h > best_h {
            best = p;
            best_h = h;
        }
    }
    best
}

/// Spatial derivatives of one slice.
struct Derivatives {
    vx: Vec<f64>,
    vxx: Vec<f64>,
    vy: Vec<f64>,
    vyy: Vec<f64>,
    vxy: Vec<f64>,
}

struct Context<'a> {
    grid: &'a GridSpec,
    config: &'a SolverConfig,
    coeffs: Vec<Coefficients>,
    rho: f64,
    xs: Vec<f64>,
    bounds: [f64; 2],
}

impl<'a> Context<'a> {
    fn new(model: &MarketModel, grid: &'a GridSpec, config: &'a SolverConfig) -> Result<Self> {
        let coeffs = (0..grid.ny)
            .map(|j| model.eval_coefficients(grid.y(j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Context {
            grid,
            config,
            coeffs,
            rho: model.rho(),
            xs: (0..grid.nx).map(|i| grid.x(i)).collect(),
            bounds: config.bounds(grid),
        })
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.grid.ny + j
    }

    fn derivatives(&self, v: &[f64]) -> Derivatives {
        let g = self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let (dx, dy) = (g.dx(), g.dy());
        let b = self.config.boundaries;
        let n = nx * ny;
        let mut vx = vec![0.0; n];
        let mut vxx = vec![0.0; n];
        let mut vy = vec![0.0; n];
        let mut vyy = vec![0.0; n];
        let mut vxy = vec![0.0; n];
        let at = |i: usize, j: usize| v[i * ny + j];
        for i in 0..nx {
            for j in 0..ny {
                let k = i * ny + j;
                let (d1, d2) = if i == 0 {
                    self.x_edge(v, 0, j, 1, b.x_lo).derivatives()
                } else if i == nx - 1 {
                    self.x_edge(v, i, j, -1, b.x_hi).derivatives()
                } else {
                    (
                        (at(i + 1, j) - at(i - 1, j)) / (2.0 * dx),
                        (at(i + 1, j) - 2.0 * at(i, j) + at(i - 1, j)) / (dx * dx),
                    )
                };
                vx[k] = d1;
                vxx[k] = d2;
                let (e1, e2) = if j == 0 {
                    (
                        (-3.0 * at(i, 0) + 4.0 * at(i, 1) - at(i, 2)) / (2.0 * dy),
                        edge_second(b.y_lo, at(i, 0), at(i, 1), at(i, 2), dy),
                    )
                } else if j == ny - 1 {
                    (
                        (3.0 * at(i, j) - 4.0 * at(i, j - 1) + at(i, j - 2)) / (2.0 * dy),
                        edge_second(b.y_hi, at(i, j), at(i, j - 1), at(i, j - 2), dy),
                    )
                } else {
                    (
                        (at(i, j + 1) - at(i, j - 1)) / (2.0 * dy),
                        (at(i, j + 1) - 2.0 * at(i, j) + at(i, j - 1)) / (dy * dy),
                    )
                };
                vy[k] = e1;
                vyy[k] = e2;
            }
        }
        // V_xy = D_y(D_x V); in the interior this is the four-corner stencil
        for i in 0..nx {
            for j in 0..ny {
                let w = |jj: usize| vx[i * ny + jj];
                vxy[i * ny + j] = if j == 0 {
                    (-3.0 * w(0) + 4.0 * w(1) - w(2)) / (2.0 * dy)
                } else if j == ny - 1 {
                    (3.0 * w(j) - 4.0 * w(j - 1) + w(j - 2)) / (2.0 * dy)
                } else {
                    (w(j + 1) - w(j - 1)) / (2.0 * dy)
                };
            }
        }
        Derivatives {
            vx,
            vxx,
            vy,
            vyy,
            vxy,
        }
    }

    /// Optimal π at every node from the given derivatives. With `edge_dt`,
    /// π on one-sided x edges is additionally limited so that
    /// `edge_dt · ½σ²π²/dx² ≤ edge_diffusion_limit`.
    fn policy(&self, d: &Derivatives, edge_dt: Option<f64>) -> (Vec<f64>, usize) {
        let g = self.grid;
        let dx = g.dx();
        let mut pis = vec![0.0; g.slice_len()];
        let mut clipped = 0;
        for i in 0..g.nx {
            for j in 0..g.ny {
                let k = self.idx(i, j);
                let c = &self.coeffs[j];
                let mut a = argmax_pi_closed(
                    d.vx[k],
                    d.vxx[k],
                    d.vxy[k],
                    c,
                    self.rho,
                    self.bounds,
                    self.config.curvature_floor,
                );
                let edge = match i {
                    0 => Some(self.config.boundaries.x_lo),
                    i if i == g.nx - 1 => Some(self.config.boundaries.x_hi),
                    _ => None,
                };
                if let (Some(dt), Some(EdgeTreatment::OneSided)) = (edge_dt, edge) {
                    let cap =
                        (2.0 * self.config.edge_diffusion_limit * dx * dx / dt).sqrt() / c.sigma;
                    if a.pi.abs() > cap {
                        a = Argmax {
                            pi: a.pi.clamp(-cap, cap),
                            clipped: true,
                        };
                    }
                }
                pis[k] = a.pi;
                clipped += a.clipped as usize;
            }
        }
        (pis, clipped)
    }

    /// Full HJB operator (without V_t) at every node, for a given policy.
    fn operator(&self, d: &Derivatives, pis: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let mut out = vec![0.0; g.slice_len()];
        for i in 0..g.nx {
            for j in 0..g.ny {
                let k = self.idx(i, j);
                let c = &self.coeffs[j];
                out[k] = c.r * self.xs[i] * d.vx[k]
                    + c.b * d.vy[k]
                    + 0.5 * d.vyy[k]
                    + hamiltonian_term(pis[k], d.vx[k], d.vxx[k], d.vxy[k], c, self.rho);
            }
        }
        out
    }

    fn cfl(&self, pis: &[f64], dt: f64) -> f64 {
        let g = self.grid;
        let (dx, dy) = (g.dx(), g.dy());
        let mut worst: f64 = 0.0;
        for i in 0..g.nx {
            for j in 0..g.ny {
                let k = self.idx(i, j);
                let c = &self.coeffs[j];
                let pi = pis[k];
                let mut rate =
                    1.0 / (dy * dy) + c.b.abs() / dy + (self.rho * c.sigma * pi).abs() / (dx * dy);
                if self.config.scheme == Scheme::Explicit {
                    let drift = c.r * self.xs[i] + c.excess_return() * pi;
                    rate += c.sigma * c.sigma * pi * pi / (dx * dx) + drift.abs() / dx;
                }
                worst = worst.max(dt * rate);
            }
        }
        worst
    }

    /// One backward step of length `dt` from `v_next`.
    fn step(&self, v_next: &[f64], dt: f64, step_index: usize) -> Result<StepOutcome> {
        let d = self.derivatives(v_next);
        let edge_dt = (self.config.scheme == Scheme::ImplicitX).then_some(dt);
        let (pis, clipped) = self.policy(&d, edge_dt);
        let cfl = self.cfl(&pis, dt);
        if cfl > 1.0 {
            return Err(Error::Stability {
                cfl,
                step: step_index,
            });
        }
        let values = match self.config.scheme {
            Scheme::Explicit => {
                let op = self.operator(&d, &pis);
                v_next.iter().zip(&op).map(|(v, l)| v + dt * l).collect()
            }
            Scheme::ImplicitX => self.implicit_x(v_next, &d, &pis, dt),
        };
        Ok(StepOutcome {
            values,
            cfl,
            clipped_nodes: clipped,
        })
    }

    fn implicit_x(&self, v_next: &[f64], d: &Derivatives, pis: &[f64], dt: f64) -> Vec<f64> {
        let g = self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let dx = g.dx();
        let bnd = self.config.boundaries;
        let columns: Vec<Vec<f64>> = (0..ny)
            .into_par_iter()
            .map(|j| {
                let c = &self.coeffs[j];
                let mut rhs = vec![0.0; nx];
                for (i, slot) in rhs.iter_mut().enumerate() {
                    let k = i * ny + j;
                    let explicit =
                        c.b * d.vy[k] + 0.5 * d.vyy[k] + self.rho * c.sigma * pis[k] * d.vxy[k];
                    *slot = v_next[k] + dt * explicit;
                }
                let coeff = |i: usize| -> (f64, f64) {
                    let pi = pis[i * ny + j];
                    (
                        c.r * self.xs[i] + c.excess_return() * pi,
                        0.5 * c.sigma * c.sigma * pi * pi,
                    )
                };
                // band[i][3 + d] multiplies V[i + d]
                let mut band = vec![[0.0; 7]; nx];
                #[allow(clippy::needless_range_loop)]
                for i in 1..nx - 1 {
                    let (a, dd) = coeff(i);
                    let diff = dd / (dx * dx);
                    let (mut lo, mut di, mut up) =
                        (diff - a / (2.0 * dx), -2.0 * diff, diff + a / (2.0 * dx));
                    if lo < 0.0 || up < 0.0 {
                        // upwind the drift
                        if a >= 0.0 {
                            lo = diff;
                            di = -2.0 * diff - a / dx;
                            up = diff + a / dx;
                        } else {
                            lo = diff - a / dx;
                            di = -2.0 * diff + a / dx;
                            up = diff;
                        }
                    }
                    band[i][2] = -dt * lo;
                    band[i][3] = 1.0 - dt * di;
                    band[i][4] = -dt * up;
                }
                // edge rows, `dir` pointing into the domain
                let mut edge_row = |i: usize, dir: isize, treat: EdgeTreatment| {
                    let at = |m: isize| (3 + dir * m) as usize;
                    let row = &mut band[i];
                    let (a, dd) = coeff(i);
                    let op = match treat {
                        EdgeTreatment::CurvatureRatio => {
                            let e = self.x_edge(v_next, i, j, dir, treat);
                            // V_x = w (V[i+dir] - V[i]), V_xx = ratio V_x
                            let kappa = (a + dd * e.ratio) * e.weight;
                            [-kappa, kappa, 0.0]
                        }
                        _ => {
                            let curv = match treat {
                                EdgeTreatment::OneSided => dd / (dx * dx),
                                _ => 0.0,
                            };
                            let s = dir as f64 * a / (2.0 * dx);
                            [-3.0 * s + curv, 4.0 * s - 2.0 * curv, -s + curv]
                        }
                    };
                    for (m, w) in op.into_iter().enumerate() {
                        row[at(m as isize)] = -dt * w;
                    }
                    row[3] += 1.0;
                };
                edge_row(0, 1, bnd.x_lo);
                edge_row(nx - 1, -1, bnd.x_hi);
                solve_banded(&mut band, &mut rhs)
            })
            .collect();
        let mut out = vec![0.0; nx * ny];
        for (j, col) in columns.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                out[i * ny + j] = v;
            }
        }
        out
    }

    /// Edge derivatives in x at node `i`, `dir` pointing into the domain.
    fn x_edge(&self, v: &[f64], i: usize, j: usize, dir: isize, treat: EdgeTreatment) -> XEdge {
        let ny = self.grid.ny;
        let dx = self.grid.dx();
        let at = |m: isize| v[(i as isize + dir * m) as usize * ny + j];
        let d = dir as f64;
        match treat {
            EdgeTreatment::CurvatureRatio => {
                let ratio_at = |m: isize| {
                    let vx = d * (at(m + 1) - at(m - 1)) / (2.0 * dx);
                    let vxx = (at(m + 1) - 2.0 * at(m) + at(m - 1)) / (dx * dx);
                    vxx / vx
                };
                let xs = |m: isize| self.xs[(i as isize + dir * m) as usize];
                let mut ratio = (2.0 * ratio_at(1) * xs(1) - ratio_at(2) * xs(2)) / xs(0);
                if !ratio.is_finite() {
                    ratio = 0.0;
                }
                ratio = ratio.clamp(-1.0 / dx, 1.0 / dx);
                let weight = d / ((1.0 + d * ratio * dx / 2.0) * dx);
                XEdge {
                    vx: weight * (at(1) - at(0)),
                    ratio,
                    weight,
                    vxx: None,
                }
            }
            _ => XEdge {
                vx: -d * (3.0 * at(0) - 4.0 * at(1) + at(2)) / (2.0 * dx),
                ratio: 0.0,
                weight: 0.0,
                vxx: Some(edge_second(treat, at(0), at(1), at(2), dx)),
            },
        }
    }
}

struct XEdge {
    vx: f64,
    ratio: f64,
    weight: f64,
    vxx: Option<f64>,
}

impl XEdge {
    fn derivatives(&self) -> (f64, f64) {
        (self.vx, self.vxx.unwrap_or(self.ratio * self.vx))
    }
}

fn edge_second(treat: EdgeTreatment, v0: f64, v1: f64, v2: f64, h: f64) -> f64 {
    match treat {
        EdgeTreatment::OneSided | EdgeTreatment::CurvatureRatio => (v0 - 2.0 * v1 + v2) / (h * h),
        EdgeTreatment::ZeroCurvature => 0.0,
    }
}

/// Banded Gaussian elimination without pivoting, three bands each side;
/// `band[i][3 + d]` is the coefficient of unknown `i + d`.
fn solve_banded(band: &mut [[f64; 7]], rhs: &mut [f64]) -> Vec<f64> {
    let n = band.len();
    for p in 0..n {
        let pivot = band[p][3];
        for i in p + 1..(p + 4).min(n) {
            let off = 3 + p as isize - i as isize;
            let f = band[i][off as usize] / pivot;
            if f == 0.0 {
                continue;
            }
            for d in 0..4 {
                if p + d >= n {
                    break;
                }
                let col = (3 + (p + d) as isize - i as isize) as usize;
                band[i][col] -= f * band[p][3 + d];
            }
            rhs[i] -= f * rhs[p];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for d in 1..4 {
            if i + d < n {
                acc -= band[i][3 + d] * x[i + d];
            }
        }
        x[i] = acc / band[i][3];
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub values: Vec<f64>,
    pub cfl: f64,
    pub clipped_nodes: usize,
}

/// One backward step of length `dt` on a single `nx * ny` slice.
pub fn step_backward(
    v_next: &[f64],
    dt: f64,
    model: &MarketModel,
    grid: &GridSpec,
    config: &SolverConfig,
) -> Result<StepOutcome> {
    if v_next.len() != grid.slice_len() || v_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition(
            "input slice must be finite with nx * ny entries".into(),
        ));
    }
    let ctx = Context::new(model, grid, config)?;
    ctx.step(v_next, dt, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// Max |discrete HJB residual| over interior nodes on the last substep.
    pub max_residual: f64,
    pub clipped_nodes: usize,
    pub cfl: f64,
    pub monotonicity_violations: usize,
    pub concavity_violations: usize,
    pub argmax_checks: usize,
    pub argmax_mismatches: usize,
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub value: ValueSurface,
    /// π* at every node, from the derivatives of that slice.
    pub policy: ValueSurface,
    pub diagnostics: Vec<StepDiagnostics>,
    pub substeps: usize,
}

impl HjbSolution {
    pub fn max_residual(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.max_residual)
            .fold(0.0, f64::max)
    }

    pub fn monotonicity_violations(&self) -> usize {
        self.diagnostics
            .iter()
            .map(|d| d.monotonicity_violations)
            .sum()
    }

    pub fn argmax_mismatches(&self) -> usize {
        self.diagnostics.iter().map(|d| d.argmax_mismatches).sum()
    }
}

/// Backward sweep from the terminal condition V(T, x, y) = u(x) to t0.
pub fn solve(
    model: &MarketModel,
    utility: &Utility,
    grid: &GridSpec,
    config: &SolverConfig,
) -> Result<HjbSolution> {
    grid.validate()?;
    utility.validate()?;
    config.validate(grid)?;
    let ctx = Context::new(model, grid, config)?;
    let (nt, n) = (grid.nt, grid.slice_len());
    let substeps = config.substeps(grid);
    let dt = grid.dt() / substeps as f64;

    let mut values = vec![0.0; grid.len()];
    let mut policy = vec![0.0; grid.len()];
    {
        let terminal = &mut values[nt * n..];
        for i in 0..grid.nx {
            let u = utility.value(grid.x(i))?;
            for j in 0..grid.ny {
                terminal[i * grid.ny + j] = u;
            }
        }
    }
    let mut diagnostics = Vec::with_capacity(nt);
    let terminal_d = ctx.derivatives(&values[nt * n..]);
    let (terminal_pi, _) = ctx.policy(&terminal_d, None);
    policy[nt * n..].copy_from_slice(&terminal_pi);

    for k in (0..nt).rev() {
        let mut current = values[(k + 1) * n..(k + 2) * n].to_vec();
        let mut cfl: f64 = 0.0;
        let mut residual = 0.0;
        for s in 0..substeps {
            let out = ctx.step(&current, dt, k)?;
            cfl = cfl.max(out.cfl);
            if s + 1 == substeps {
                residual = ctx.residual(&out.values, &current, dt);
            }
            current = out.values;
        }
        let d = ctx.derivatives(&current);
        let (pis, clipped) = ctx.policy(&d, None);
        let (checks, mismatches) = ctx.spot_check(&d, k);
        diagnostics.push(StepDiagnostics {
            step: k,
            t: grid.t(k),
            max_residual: residual,
            clipped_nodes: clipped,
            cfl,
            monotonicity_violations: ctx.monotonicity_violations(&current),
            concavity_violations: ctx.concavity_violations(&current),
            argmax_checks: checks,
            argmax_mismatches: mismatches,
        });
        values[k * n..(k + 1) * n].copy_from_slice(&current);
        policy[k * n..(k + 1) * n].copy_from_slice(&pis);
    }
    diagnostics.reverse();
    Ok(HjbSolution {
        value: ValueSurface::new(*grid, values, "hjb_fd")?,
        policy: ValueSurface::new(*grid, policy, "hjb_fd_policy")?,
        diagnostics,
        substeps,
    })
}

impl Context<'_> {
    /// Max |(V⁺ − V)/dt + L(V)| over interior nodes, with π* from V.
    fn residual(&self, v: &[f64], v_next: &[f64], dt: f64) -> f64 {
        let g = self.grid;
        let d = self.derivatives(v);
        let (pis, _) = self.policy(&d, None);
        let op = self.operator(&d, &pis);
        let mut worst: f64 = 0.0;
        for i in 1..g.nx - 1 {
            for j in 1..g.ny - 1 {
                let k = self.idx(i, j);
                worst = worst.max(((v_next[k] - v[k]) / dt + op[k]).abs());
            }
        }
        worst
    }

    fn monotonicity_violations(&self, v: &[f64]) -> usize {
        let g = self.grid;
        let mut count = 0;
        for i in 0..g.nx - 1 {
            for j in 0..g.ny {
                let (a, b) = (v[self.idx(i, j)], v[self.idx(i + 1, j)]);
                if b < a - 1e-12 * (1.0 + a.abs()) {
                    count += 1;
                }
            }
        }
        count
    }

    fn concavity_violations(&self, v: &[f64]) -> usize {
        let g = self.grid;
        let mut count = 0;
        for i in 1..g.nx - 1 {
            for j in 0..g.ny {
                let (a, b, c) = (
                    v[self.idx(i - 1, j)],
                    v[self.idx(i, j)],
                    v[self.idx(i + 1, j)],
                );
                if a - 2.0 * b + c > 1e-10 * (1.0 + b.abs()) {
                    count += 1;
                }
            }
        }
        count
    }

    /// Re-derive the argmax by grid search on a deterministic sample of
    /// nodes. Agreement means within one grid cell, or an equally good
    /// Hamiltonian value when the quadratic is flat.
    fn spot_check(&self, d: &Derivatives, step: usize) -> (usize, usize) {
        let g = self.grid;
        let n = g.slice_len();
        let count = (self.config.spot_check_fraction * n as f64).round() as usize;
        if count == 0 {
            return (0, 0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + step as u64);
        let cells = self.config.spot_check_cells;
        let width = (self.bounds[1] - self.bounds[0]) / cells as f64;
        let mut mismatches = 0;
        for _ in 0..count {
            let k = rng.random_range(0..n);
            let j = k % g.ny;
            let c = &self.coeffs[j];
            let closed = argmax_pi_closed(
                d.vx[k],
                d.vxx[k],
                d.vxy[k],
                c,
                self.rho,
                self.bounds,
                self.config.curvature_floor,
            )
            .pi;
            let brute =
                argmax_pi_brute(d.vx[k], d.vxx[k], d.vxy[k], c, self.rho, self.bounds, cells);
            let h = |p: f64| hamiltonian_term(p, d.vx[k], d.vxx[k], d.vxy[k], c, self.rho);
            let agree = (closed - brute).abs() <= width
                || h(closed) >= h(brute) - 1e-12 * (1.0 + h(brute).abs());
            if !agree {
                mismatches += 1;
            }
        }
        (count, mismatches)
    }
}

/// The solved policy as a grid [`PolicyField`].
pub fn extract_policy(solution: &HjbSolution) -> PolicyField {
    PolicyField::Grid(solution.policy.clone())
}
