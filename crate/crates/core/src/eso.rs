//! Employee stock option cost.
//!
//! After vesting the holder exercises at the boundary `y*(t)` produced by
//! the indifference problem and loses the option (cashing the intrinsic
//! value) at job-termination rate `α`:
//!
//! `C_t + ½c²y²C_yy - αC + α(y - K)^+ = 0` below `y*(t)`, `C = (y - K)^+` above,
//!
//! and before vesting termination forfeits the option:
//!
//! `C_t + ½c²y²C_yy - αC = 0` on `[0, t_v)`, matched to the post-vesting value at `t_v`.
//!
//! Both are solved on the pricing grid's log lattice with weights fitted so
//! that constants and `y` itself are exact martingales of the discrete
//! generator, which keeps the scheme monotone and positivity preserving.

use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, ModelParams, Surface};
use crate::error::{Error, Result};
use crate::tridiag;
use crate::vi::FreeBoundary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsoSpec {
    /// Underlying model; its drift must be zero.
    pub base: ModelParams,
    /// Job-termination intensity.
    pub alpha: f64,
    /// Vesting date, in `(0, T)`.
    pub vesting: f64,
}

impl EsoSpec {
    pub fn new(base: ModelParams, alpha: f64, vesting: f64) -> Result<Self> {
        if base.drift != 0.0 {
            return Err(Error::InvalidParams(format!(
                "employee options are valued with zero drift, got b = {}",
                base.drift
            )));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidParams(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(vesting > 0.0 && vesting < base.maturity) {
            return Err(Error::InvalidParams(format!(
                "vesting date must lie in (0, {}), got {vesting}",
                base.maturity
            )));
        }
        Ok(Self { base, alpha, vesting })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsoSolution {
    pub spec: EsoSpec,
    /// `C` on `θ ∈ [0, T - t_v]`; row 0 is maturity.
    pub post_vesting: Surface,
    /// `C` on `θ ∈ [T - t_v, T]`, shifted so that row 0 is the vesting date.
    pub pre_vesting: Surface,
    /// Vesting date after snapping to the time lattice.
    pub vesting: f64,
    pub boundary: Option<FreeBoundary>,
}

impl EsoSolution {
    /// `C(y, t)` from whichever stage covers `t`.
    pub fn cost(&self, y: f64, t: f64) -> Result<f64> {
        eso_cost(y, t, self)
    }
}

#[derive(Debug, Clone, Copy)]
struct FittedWeights {
    up: f64,
    down: f64,
}

impl FittedWeights {
    fn new(vol: f64, dx: f64) -> Self {
        let up = vol * vol / (dx * dx * (1.0 + dx.exp()));
        Self { up, down: up * dx.exp() }
    }
}

/// One implicit step of `C_θ = G C - αC + src` on nodes `0..fixed`, with
/// `G` the fitted generator, node 0 reduced to `C_θ = -αC + src` and nodes
/// `fixed..` held at `dirichlet`.
fn implicit_step(
    prev: &[f64],
    dt: f64,
    w: FittedWeights,
    alpha: f64,
    source: &[f64],
    fixed: usize,
    dirichlet: &[f64],
) -> Result<Vec<f64>> {
    let n = prev.len();
    let mut out = dirichlet.to_vec();
    if fixed == 0 {
        return Ok(out);
    }
    let m = fixed;
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    diag[0] = 1.0 / dt + alpha;
    rhs[0] = prev[0] / dt + source[0];
    for i in 1..m {
        lower[i] = -w.down;
        diag[i] = 1.0 / dt + w.up + w.down + alpha;
        upper[i] = -w.up;
        rhs[i] = prev[i] / dt + source[i];
    }
    if m < n && m > 1 {
        rhs[m - 1] += w.up * dirichlet[m];
    }
    let solved = tridiag::solve(&lower, &diag, &upper, &rhs)?;
    out[..m].copy_from_slice(&solved);
    Ok(out)
}

/// Number of `θ` steps between maturity and the (snapped) vesting date.
fn vesting_rows(spec: &EsoSpec, grid: &GridSpec) -> Result<usize> {
    let rows = ((spec.base.maturity - spec.vesting) / grid.dtheta()).round() as usize;
    if rows == 0 || rows >= grid.n_theta {
        return Err(Error::InvalidGrid(format!(
            "vesting date {} must fall strictly inside the time lattice of {} steps",
            spec.vesting, grid.n_theta
        )));
    }
    Ok(rows)
}

fn check_grid(spec: &EsoSpec, grid: &GridSpec) -> Result<()> {
    grid.validate(spec.base.strike)?;
    if (grid.theta_max - spec.base.maturity).abs() > 1e-12 * (1.0 + spec.base.maturity) {
        return Err(Error::InvalidGrid("grid horizon must equal the maturity".into()));
    }
    Ok(())
}

/// Post-vesting cost on `θ ∈ [0, T - t_v]`, exercising at and above
/// `boundary` (pass `None` for no early exercise). The boundary must come
/// from a pricing run on the same grid.
pub fn solve_post_vesting(spec: &EsoSpec, boundary: Option<&FreeBoundary>, grid: &GridSpec) -> Result<Surface> {
    check_grid(spec, grid)?;
    let rows = vesting_rows(spec, grid)?;
    if let Some(b) = boundary {
        if b.theta_samples.len() != grid.n_theta || (b.dx - grid.dx()).abs() > 1e-12 {
            return Err(Error::InvalidGrid(
                "exercise boundary was not computed on this grid".into(),
            ));
        }
    }
    let n = grid.n_x;
    let dt = grid.dtheta();
    let w = FittedWeights::new(spec.base.vol, grid.dx());
    let payoff: Vec<f64> = grid.xs().iter().map(|&x| (x.exp() - spec.base.strike).max(0.0)).collect();
    let source: Vec<f64> = payoff.iter().map(|v| spec.alpha * v).collect();
    let mut out = vec![payoff.clone()];
    for j in 1..=rows {
        let fixed = match boundary {
            None => n - 1,
            Some(b) => {
                let s = b.s_values[j - 1].ok_or(Error::CensoredBoundary { theta: grid.theta(j) })?;
                let first = (0..n).find(|&i| grid.x(i) >= s - 1e-12).unwrap_or(n - 1);
                first.min(n - 1)
            }
        };
        let row = implicit_step(&out[j - 1], dt, w, spec.alpha, &source, fixed, &payoff)?;
        out.push(row);
    }
    let g = GridSpec { n_theta: rows, theta_max: rows as f64 * dt, ..*grid };
    Surface::from_rows(g, &out)
}

/// Pre-vesting cost from the post-vesting surface's last row. The killing
/// is integrated exactly: `C = e^{-α(θ - θ_v)} D` with `D` solving the
/// driftless heat equation implicitly, `D` frozen at the two edge nodes.
pub fn solve_pre_vesting(spec: &EsoSpec, post: &Surface, grid: &GridSpec) -> Result<Surface> {
    check_grid(spec, grid)?;
    let rows_post = post.grid.n_theta;
    let rows = grid.n_theta.saturating_sub(rows_post);
    if rows == 0 || post.grid.n_x != grid.n_x {
        return Err(Error::InvalidGrid("post-vesting surface does not fit the grid".into()));
    }
    let n = grid.n_x;
    let dt = grid.dtheta();
    let w = FittedWeights::new(spec.base.vol, grid.dx());
    let zero = vec![0.0; n];
    let seam = post.row(rows_post).to_vec();
    let mut heat = seam.clone();
    let mut out = vec![seam.clone()];
    for k in 1..=rows {
        heat = implicit_step(&heat, dt, w, 0.0, &zero, n - 1, &seam)?;
        let decay = (-spec.alpha * k as f64 * dt).exp();
        out.push(heat.iter().map(|v| decay * v).collect());
    }
    let g = GridSpec { n_theta: rows, theta_max: rows as f64 * dt, ..*grid };
    Surface::from_rows(g, &out)
}

/// Both stages on the pricing grid.
pub fn solve_eso(spec: &EsoSpec, boundary: Option<&FreeBoundary>, grid: &GridSpec) -> Result<EsoSolution> {
    let post = solve_post_vesting(spec, boundary, grid)?;
    let pre = solve_pre_vesting(spec, &post, grid)?;
    if !(post.all_finite() && pre.all_finite()) {
        return Err(Error::NonFinite("employee option surface".into()));
    }
    Ok(EsoSolution {
        spec: *spec,
        vesting: spec.base.maturity - post.grid.theta_max,
        post_vesting: post,
        pre_vesting: pre,
        boundary: boundary.cloned(),
    })
}

/// `C(y, t)` by bilinear interpolation in the stage covering `t`.
pub fn eso_cost(y: f64, t: f64, sol: &EsoSolution) -> Result<f64> {
    let (x, theta) = crate::domain::to_forward(y, t, &sol.spec.base)?;
    let seam = sol.post_vesting.grid.theta_max;
    if theta <= seam {
        sol.post_vesting.interpolate(x, theta.min(seam))
    } else {
        sol.pre_vesting.interpolate(x, theta - seam)
    }
}
