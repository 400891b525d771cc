//! Obstacle problem `min(u_θ - L u, u - (e^x - K)^+) = 0`, `u(x, 0) = (e^x - K)^+`.
//!
//! Two independent routes to the same discrete inequality: ε-continuation of
//! the penalized problem, and projected Gauss-Seidel relaxation of each
//! implicit step. The free boundary `s(θ)` is read off the contact set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, ModelParams, Surface};
use crate::error::{Error, Result};
use crate::operator::LogProblem;
use crate::penalty::{BoundReport, PenaltySettings, PenaltySolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViMethod {
    PenaltyContinuation,
    ProjectedRelaxation,
}

/// One `(ε, N)` stage of the continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub epsilon: f64,
    pub n_trunc: f64,
}

/// How the penalized surfaces of a schedule are combined into the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    /// Finest stage as is.
    None,
    /// `2 u(ε/2) - u(ε)` over the last two stages.
    Richardson,
    /// Two Richardson passes over the last three stages; removes both the
    /// `ε` and the `ε ln ε` terms of the penalty offset when ε halves.
    #[default]
    Romberg,
}

/// Settings of [`solve_vi_penalty_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSettings {
    pub schedule: Vec<ScheduleEntry>,
    pub extrapolation: Extrapolation,
    pub newton_tol: f64,
    /// Multiple `n` of the payoff `n (y - K)^+`.
    pub payoff_scale: f64,
}

impl ContinuationSettings {
    pub fn new(schedule: Vec<ScheduleEntry>) -> Self {
        Self {
            schedule,
            extrapolation: Extrapolation::default(),
            newton_tol: 1e-11,
            payoff_scale: 1.0,
        }
    }
}

/// Settings of [`solve_vi_projected_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSettings {
    /// Over-relaxation factor; 1 is plain Gauss-Seidel, which keeps the
    /// iterates monotone.
    pub omega: f64,
    /// Stop once the largest nodal update of a sweep is below this (currency units).
    pub tol: f64,
    pub max_sweeps: usize,
    pub payoff_scale: f64,
}

impl Default for RelaxationSettings {
    fn default() -> Self {
        Self {
            omega: 1.0,
            tol: 1e-12,
            max_sweeps: 20_000,
            payoff_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViDiagnostics {
    pub schedule: Vec<ScheduleEntry>,
    /// Sup-norm differences between successive schedule stages.
    pub schedule_differences: Vec<f64>,
    pub extrapolation: Option<Extrapolation>,
    /// Newton iterations or relaxation sweeps, summed over all steps.
    pub iterations: usize,
    /// `max |min(u_θ - L u, u - payoff)|` over all nodes with `θ > 0`.
    pub complementarity: f64,
    pub complementarity_tol: f64,
    pub contact_tol: f64,
    pub bounds: BoundReport,
    /// Smallest off-diagonal of the linearised stencil over the surface;
    /// non-negative means the scheme was monotone everywhere.
    pub monotonicity_margin: f64,
}

/// Solution of the obstacle problem on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViSolution {
    pub surface: Surface,
    /// Row-major like the surface: `true` where the node is in the stopping region.
    pub exercise_mask: Vec<bool>,
    /// `n (e^x - K)^+` on the grid.
    pub obstacle: Vec<f64>,
    pub method: ViMethod,
    pub payoff_scale: f64,
    pub diagnostics: ViDiagnostics,
}

impl ViSolution {
    pub fn grid(&self) -> &GridSpec {
        &self.surface.grid
    }

    pub fn is_exercise(&self, i: usize, j: usize) -> bool {
        self.exercise_mask[j * self.grid().n_x + i]
    }

    pub fn mask_row(&self, j: usize) -> &[bool] {
        let n = self.grid().n_x;
        &self.exercise_mask[j * n..(j + 1) * n]
    }

    /// True when every row's stopping set is a right half-line of the grid.
    pub fn mask_single_crossing(&self) -> bool {
        (0..self.surface.n_rows()).all(|j| {
            let row = self.mask_row(j);
            match row.iter().position(|&m| m) {
                Some(first) => row[first..].iter().all(|&m| m),
                None => true,
            }
        })
    }

    /// Smallest `u - payoff` over the surface.
    pub fn obstacle_margin(&self) -> f64 {
        self.surface
            .rows()
            .flat_map(|row| row.iter().zip(&self.obstacle).map(|(u, o)| u - o))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exercise boundary `s(θ)` sampled on the `θ > 0` rows of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeBoundary {
    pub theta_samples: Vec<f64>,
    /// Rectified (running maximum) boundary; `None` where the row has no
    /// contact inside the grid (right-censored at `x_max`).
    pub s_values: Vec<Option<f64>>,
    /// Boundary before rectification.
    pub raw_values: Vec<Option<f64>>,
    pub x0: f64,
    pub dx: f64,
    pub x_max: f64,
}

impl FreeBoundary {
    /// `θ` of every right-censored sample.
    pub fn censored(&self) -> Vec<f64> {
        self.theta_samples
            .iter()
            .zip(&self.s_values)
            .filter(|(_, s)| s.is_none())
            .map(|(t, _)| *t)
            .collect()
    }

    /// Largest drop of the raw boundary between successive uncensored samples.
    pub fn max_raw_decrease(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut worst: f64 = 0.0;
        for s in self.raw_values.iter().flatten() {
            worst = worst.max(best - s);
            best = best.max(*s);
        }
        worst
    }

    /// `s(θ)` by linear interpolation between samples, with `s(0) = x₀`.
    pub fn at(&self, theta: f64) -> Result<f64> {
        let first = self.theta_samples[0];
        let last = *self.theta_samples.last().unwrap_or(&first);
        let tol = 1e-12 * (1.0 + last);
        if !(theta >= -tol && theta <= last + tol) {
            return Err(Error::OutOfDomain {
                x: f64::NAN,
                theta,
                x_min: f64::NAN,
                x_max: self.x_max,
                theta_max: last,
            });
        }
        let censored = |k: usize| Error::CensoredBoundary { theta: self.theta_samples[k] };
        if theta <= first {
            let s1 = self.s_values[0].ok_or_else(|| censored(0))?;
            let w = (theta / first).clamp(0.0, 1.0);
            return Ok((1.0 - w) * self.x0 + w * s1);
        }
        let k = self
            .theta_samples
            .partition_point(|&t| t < theta)
            .clamp(1, self.theta_samples.len() - 1);
        let (t0, t1) = (self.theta_samples[k - 1], self.theta_samples[k]);
        let s0 = self.s_values[k - 1].ok_or_else(|| censored(k - 1))?;
        let s1 = self.s_values[k].ok_or_else(|| censored(k))?;
        let w = ((theta - t0) / (t1 - t0)).clamp(0.0, 1.0);
        Ok((1.0 - w) * s0 + w * s1)
    }
}

/// Short-maturity limit of the exercise boundary: `ln K` when
/// `b - ρcλ ≤ 0`, otherwise `max(ln K, ln(2(b - ρcλ) / (γ(1-ρ²)c²)))`.
pub fn x0_limit(p: &ModelParams) -> f64 {
    let m = p.mmm_drift();
    if m <= 0.0 {
        p.log_strike()
    } else {
        p.log_strike().max((2.0 * m / p.unhedged_variance_aversion()).ln())
    }
}

/// One stage per default ε with `N` equal to the grid's half-width around `ln K`.
pub fn default_schedule(grid: &GridSpec, p: &ModelParams) -> Vec<ScheduleEntry> {
    let lk = p.log_strike();
    let n_trunc = (grid.x_max - lk).max(lk - grid.x_min);
    [1e-2, 5e-3, 2.5e-3, 1.25e-3]
        .into_iter()
        .map(|epsilon| ScheduleEntry { epsilon, n_trunc })
        .collect()
}

/// Penalty continuation with the default extrapolation.
pub fn solve_vi_penalty(grid: &GridSpec, p: &ModelParams, schedule: &[ScheduleEntry]) -> Result<ViSolution> {
    solve_vi_penalty_with(grid, p, &ContinuationSettings::new(schedule.to_vec()))
}

/// Solves the penalized problem for every stage of the schedule and
/// extrapolates `ε → 0`. Stages with `N` larger than the grid's half-width
/// are solved on a widened grid of the same spacing and restricted back.
pub fn solve_vi_penalty_with(grid: &GridSpec, p: &ModelParams, settings: &ContinuationSettings) -> Result<ViSolution> {
    grid.validate(p.strike)?;
    let schedule = &settings.schedule;
    check_schedule(schedule)?;
    let scale = settings.payoff_scale;
    let stages: Vec<(Surface, usize)> = schedule
        .par_iter()
        .map(|entry| {
            let (wide, offset) = widened_grid(grid, p, entry.n_trunc)?;
            let mut ps = PenaltySettings::for_payoff_scale(entry.epsilon, entry.n_trunc, p, scale)?;
            ps.newton_tol = settings.newton_tol;
            let sol = PenaltySolver::new(p, &wide, &ps, scale)?.solve()?;
            Ok((restrict(&sol.surface, grid, offset), sol.newton_iterations))
        })
        .collect::<Result<_>>()?;

    let differences: Vec<f64> = stages.windows(2).map(|w| w[1].0.sup_diff(&w[0].0)).collect();
    if differences.windows(2).any(|d| d[1] >= d[0]) {
        return Err(Error::NonCauchySchedule(differences));
    }

    let mode = match (settings.extrapolation, stages.len()) {
        (Extrapolation::Romberg, n) if n >= 3 => Extrapolation::Romberg,
        (Extrapolation::Romberg | Extrapolation::Richardson, n) if n >= 2 => Extrapolation::Richardson,
        _ => Extrapolation::None,
    };
    let n = stages.len();
    let last = |k: usize| stages[n - 1 - k].0.values();
    let combined: Vec<f64> = match mode {
        Extrapolation::None => last(0).to_vec(),
        Extrapolation::Richardson => last(0).iter().zip(last(1)).map(|(f, c)| 2.0 * f - c).collect(),
        Extrapolation::Romberg => last(0)
            .iter()
            .zip(last(1))
            .zip(last(2))
            .map(|((f, m), c)| 4.0 * f - 4.0 * m + c)
            .collect(),
    };

    let problem = LogProblem::new(p, grid, scale);
    let obstacle: Vec<f64> = problem.obstacle.iter().map(|o| o * problem.unit).collect();
    let rows: Vec<Vec<f64>> = combined
        .chunks_exact(grid.n_x)
        .enumerate()
        .map(|(j, row)| {
            if j == 0 {
                obstacle.clone()
            } else {
                row.iter().zip(&obstacle).map(|(u, o)| u.max(*o)).collect()
            }
        })
        .collect();
    let surface = Surface::from_rows(*grid, &rows)?;
    if !surface.all_finite() {
        return Err(Error::NonFinite("extrapolated penalty surface".into()));
    }
    let eps_final = schedule.last().map(|e| e.epsilon).unwrap_or(0.0);
    let contact_tol = eps_final.max(5.0 * grid.dx() * grid.dx());
    finish(
        p,
        surface,
        obstacle,
        &problem,
        ViMethod::PenaltyContinuation,
        scale,
        contact_tol,
        ViDiagnostics {
            schedule: schedule.clone(),
            schedule_differences: differences,
            extrapolation: Some(mode),
            iterations: stages.iter().map(|s| s.1).sum(),
            complementarity: 0.0,
            complementarity_tol: 0.0,
            contact_tol,
            bounds: BoundReport::default(),
            monotonicity_margin: 0.0,
        },
    )
}

fn check_schedule(schedule: &[ScheduleEntry]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::InvalidParams("penalty schedule is empty".into()));
    }
    for e in schedule {
        if !(e.epsilon.is_finite() && e.epsilon > 0.0 && e.n_trunc.is_finite() && e.n_trunc > 0.0) {
            return Err(Error::InvalidParams(format!("bad schedule entry {e:?}")));
        }
    }
    for w in schedule.windows(2) {
        if !(w[1].epsilon < w[0].epsilon) || w[1].n_trunc < w[0].n_trunc {
            return Err(Error::InvalidParams(
                "schedule must be strictly decreasing in epsilon and non-decreasing in N".into(),
            ));
        }
    }
    Ok(())
}

/// Grid `(ln K - N, ln K + N)` with the spacing of `grid`, and the index of
/// `grid.x_min` inside it.
fn widened_grid(grid: &GridSpec, p: &ModelParams, n_trunc: f64) -> Result<(GridSpec, usize)> {
    let lk = p.log_strike();
    let dx = grid.dx();
    let lo = lk - n_trunc;
    let cells = 2.0 * n_trunc / dx;
    let offset = (grid.x_min - lo) / dx;
    let aligned = |v: f64| (v - v.round()).abs() < 1e-6;
    if !aligned(cells) || !aligned(offset) || offset.round() < 0.0 || grid.x_max > lk + n_trunc + 1e-9 {
        return Err(Error::InvalidGrid(format!(
            "truncation N = {n_trunc} must contain the grid and align with its spacing {dx}"
        )));
    }
    let wide = GridSpec::new(lo, lk + n_trunc, cells.round() as usize + 1, grid.n_theta, grid.theta_max)?;
    Ok((wide, offset.round() as usize))
}

fn restrict(surface: &Surface, grid: &GridSpec, offset: usize) -> Surface {
    let rows: Vec<Vec<f64>> = surface
        .rows()
        .map(|row| row[offset..offset + grid.n_x].to_vec())
        .collect();
    Surface::from_rows(*grid, &rows).expect("restriction keeps the row layout")
}

/// Projected relaxation with default settings.
pub fn solve_vi_projected(grid: &GridSpec, p: &ModelParams) -> Result<ViSolution> {
    solve_vi_projected_with(grid, p, &RelaxationSettings::default())
}

/// Each implicit step is solved by projected Gauss-Seidel: a nodal update of
/// the implicit equation followed by `max` with the payoff.
pub fn solve_vi_projected_with(grid: &GridSpec, p: &ModelParams, settings: &RelaxationSettings) -> Result<ViSolution> {
    grid.validate(p.strike)?;
    if !(settings.omega > 0.0 && settings.omega < 2.0 && settings.tol > 0.0) {
        return Err(Error::InvalidParams(format!("invalid relaxation settings {settings:?}")));
    }
    let scale = settings.payoff_scale;
    let problem = LogProblem::new(p, grid, scale);
    let psi = &problem.obstacle;
    let dt = grid.dtheta();
    let alpha = problem.centre_coefficient();
    let tol = settings.tol / problem.unit;
    let n = grid.n_x;
    let mut rows = vec![psi.clone()];
    let mut sweeps_total = 0;
    for j in 1..=grid.n_theta {
        let prev = &rows[j - 1];
        let mut u = prev.clone();
        let mut converged = false;
        let mut update = f64::INFINITY;
        for _ in 0..settings.max_sweeps {
            sweeps_total += 1;
            update = 0.0;
            for i in 0..n {
                let rest = problem.apply(&u, i) - alpha * u[i];
                let target = (prev[i] / dt + rest) / (1.0 / dt - alpha);
                let new = (u[i] + settings.omega * (target - u[i])).max(psi[i]);
                update = f64::max(update, (new - u[i]).abs());
                u[i] = new;
            }
            if !update.is_finite() {
                return Err(Error::NonFinite(format!("relaxation at theta = {}", grid.theta(j))));
            }
            if update <= tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::SweepDivergence {
                theta: grid.theta(j),
                update: update * problem.unit,
                sweeps: settings.max_sweeps,
            });
        }
        rows.push(u);
    }
    let raw: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * problem.unit).collect())
        .collect();
    let surface = Surface::from_rows(*grid, &raw)?;
    let obstacle: Vec<f64> = psi.iter().map(|o| o * problem.unit).collect();
    let contact_tol = 5.0 * grid.dx() * grid.dx();
    finish(
        p,
        surface,
        obstacle,
        &problem,
        ViMethod::ProjectedRelaxation,
        scale,
        contact_tol,
        ViDiagnostics {
            schedule: Vec::new(),
            schedule_differences: Vec::new(),
            extrapolation: None,
            iterations: sweeps_total,
            complementarity: 0.0,
            complementarity_tol: 0.0,
            contact_tol,
            bounds: BoundReport::default(),
            monotonicity_margin: 0.0,
        },
    )
}

/// Fills in the mask and the a-posteriori diagnostics shared by both methods.
#[allow(clippy::too_many_arguments)]
fn finish(
    p: &ModelParams,
    surface: Surface,
    obstacle: Vec<f64>,
    problem: &LogProblem,
    method: ViMethod,
    scale: f64,
    contact_tol: f64,
    mut diagnostics: ViDiagnostics,
) -> Result<ViSolution> {
    let g = surface.grid;
    let lk = p.log_strike();
    let dt = g.dtheta();
    let unit = problem.unit;
    let mut mask = Vec::with_capacity(surface.values().len());
    let mut bounds = BoundReport::new(&g);
    let mut comp: f64 = 0.0;
    let mut margin = f64::INFINITY;
    for j in 0..=g.n_theta {
        let row = surface.row(j);
        for (i, (u, o)) in row.iter().zip(&obstacle).enumerate() {
            mask.push(g.x(i) >= lk - 1e-12 && u - o <= contact_tol);
        }
        let prev = (j > 0).then(|| surface.row(j - 1));
        bounds.record_row(p, &g, scale, row, &obstacle, prev, j);
        if let Some(prev) = prev {
            let scaled: Vec<f64> = row.iter().map(|v| v / unit).collect();
            for i in 0..g.n_x {
                let r = (row[i] - prev[i]) / dt - unit * problem.apply(&scaled, i);
                comp = comp.max(r.min(row[i] - obstacle[i]).abs());
            }
            margin = margin.min(problem.monotonicity_margin(&scaled));
        }
    }
    diagnostics.complementarity = comp;
    diagnostics.complementarity_tol = 10.0 * (g.dx() * g.dx() + dt);
    diagnostics.bounds = bounds;
    diagnostics.monotonicity_margin = margin;
    Ok(ViSolution {
        surface,
        exercise_mask: mask,
        obstacle,
        method,
        payoff_scale: scale,
        diagnostics,
    })
}

/// Reads `s(θ)` off the contact set of each `θ > 0` row.
///
/// The first contact node of a row and its left neighbour bracket the
/// boundary; the crossing of `u - payoff` through the contact tolerance is
/// located by linear interpolation between them.
pub fn extract_boundary(sol: &ViSolution, p: &ModelParams) -> FreeBoundary {
    let g = *sol.grid();
    let tol = sol.diagnostics.contact_tol;
    let mut theta_samples = Vec::with_capacity(g.n_theta);
    let mut raw_values = Vec::with_capacity(g.n_theta);
    for j in 1..=g.n_theta {
        theta_samples.push(g.theta(j));
        let row = sol.surface.row(j);
        let raw = sol.mask_row(j).iter().position(|&m| m).map(|i| {
            if i == 0 {
                return g.x(0);
            }
            let gap_left = row[i - 1] - sol.obstacle[i - 1];
            let gap = row[i] - sol.obstacle[i];
            let w = if gap_left > gap {
                ((gap_left - tol) / (gap_left - gap)).clamp(0.0, 1.0)
            } else {
                1.0
            };
            g.x(i - 1) + w * (g.x(i) - g.x(i - 1))
        });
        raw_values.push(raw);
    }
    let mut running = f64::NEG_INFINITY;
    let s_values = raw_values
        .iter()
        .map(|s| {
            s.map(|v| {
                running = running.max(v);
                running
            })
        })
        .collect();
    FreeBoundary {
        theta_samples,
        s_values,
        raw_values,
        x0: x0_limit(p),
        dx: g.dx(),
        x_max: g.x_max,
    }
}
