//! Penalized, truncated forward problem
//!
//! `u_θ - L u + β_ε(u - π_ε(e^x - K)) = 0` on `(ln K - N, ln K + N)`,
//! `u_x = 0` at the left edge, `u_x = e^x` at the right edge,
//! `u(x, 0) = π_ε(e^x - K)`,
//!
//! marched in `theta` by implicit Euler with a damped Newton iteration per
//! step. The penalty is `β_ε(t) = -C₀ exp(-t/ε)` and the obstacle smoother is
//! the C¹ quadratic spline `π_ε`.

use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, ModelParams, Surface};
use crate::error::{Error, Result};
use crate::operator::LogProblem;
use crate::tridiag;

/// Largest exponent fed to `exp` inside the penalty before clamping.
const MAX_EXPONENT: f64 = 700.0;
/// Recursion depth of the step-halving retry.
const MAX_SUBSTEP_DEPTH: u32 = 8;

/// Family of the penalty function `β_ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyShape {
    /// `β_ε(t) = -C₀ exp(-t/ε)`.
    #[default]
    Exponential,
}

impl PenaltyShape {
    /// Value and derivative of `β_ε` at `t`.
    pub fn eval(&self, t: f64, epsilon: f64, c0: f64) -> (f64, f64) {
        match self {
            PenaltyShape::Exponential => {
                let e = (-t / epsilon).min(MAX_EXPONENT).exp();
                (-c0 * e, c0 / epsilon * e)
            }
        }
    }

    /// Samples `β_ε` on `[-10ε, 50ε]` and checks `β ≤ 0`, `β' ≥ 0`,
    /// `β'' ≤ 0` (by second differences) and `β(0) = -C₀`.
    pub fn check(&self, epsilon: f64, c0: f64) -> bool {
        let n = 600;
        let h = 60.0 * epsilon / n as f64;
        let ts: Vec<f64> = (0..=n).map(|k| -10.0 * epsilon + k as f64 * h).collect();
        let vals: Vec<(f64, f64)> = ts.iter().map(|&t| self.eval(t, epsilon, c0)).collect();
        let shape_ok = vals.iter().all(|&(v, d)| v <= 0.0 && d >= 0.0);
        let concave = vals.windows(3).all(|w| {
            let dd = w[0].0 - 2.0 * w[1].0 + w[2].0;
            dd <= 1e-12 * c0.max(1.0) * (1.0 + w[1].0.abs())
        });
        let at_zero = self.eval(0.0, epsilon, c0).0;
        shape_ok && concave && (at_zero + c0).abs() <= 1e-14 * c0
    }
}

/// Parameters of one penalized solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySettings {
    pub epsilon: f64,
    /// Truncation half-width `N`: the domain is `(ln K - N, ln K + N)`.
    pub n_trunc: f64,
    /// Penalty floor `C₀ = -β_ε(0)`, in currency units.
    pub c0: f64,
    /// Newton stops once `Δθ · |residual|` is below this, in currency units.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    #[serde(default)]
    pub shape: PenaltyShape,
}

impl PenaltySettings {
    /// Settings with `C₀` from [`c0_for_truncation`].
    pub fn new(epsilon: f64, n_trunc: f64, p: &ModelParams) -> Result<Self> {
        Self::for_payoff_scale(epsilon, n_trunc, p, 1.0)
    }

    /// Settings for the payoff `n (y - K)^+`.
    pub fn for_payoff_scale(epsilon: f64, n_trunc: f64, p: &ModelParams, scale: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidParams(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParams(format!("payoff scale must be > 0, got {scale}")));
        }
        Ok(Self {
            epsilon,
            n_trunc,
            c0: c0_for_unit(n_trunc, p, scale * p.strike)?,
            newton_tol: 1e-11,
            newton_max_iter: 60,
            shape: PenaltyShape::Exponential,
        })
    }

    pub fn beta(&self, t: f64) -> (f64, f64) {
        self.shape.eval(t, self.epsilon, self.c0)
    }
}

/// Penalty floor making `π_ε(e^x - K)` a subsolution on the truncated domain:
/// `C₀ = ρcλ K e^N + ½γ(1-ρ²)c² (K e^N)²`, which reduces to
/// `ρcλ e^N + ½γ(1-ρ²)c² e^{2N}` for a unit strike.
pub fn c0_for_truncation(n_trunc: f64, p: &ModelParams) -> Result<f64> {
    c0_for_unit(n_trunc, p, p.strike)
}

fn c0_for_unit(n_trunc: f64, p: &ModelParams, unit: f64) -> Result<f64> {
    if !(n_trunc.is_finite() && n_trunc >= 0.0) {
        return Err(Error::InvalidParams(format!("truncation N must be >= 0, got {n_trunc}")));
    }
    let edge = n_trunc.exp();
    let edge_sq = (2.0 * n_trunc).exp();
    if !edge_sq.is_finite() {
        return Err(Error::Overflow(format!("e^(2N) overflows for N = {n_trunc}")));
    }
    let c0 = p.correlation * p.vol * p.sharpe * unit * edge
        + 0.5 * p.unhedged_variance_aversion() * unit * unit * edge_sq;
    if !c0.is_finite() {
        return Err(Error::Overflow(format!("C0 overflows for N = {n_trunc}")));
    }
    Ok(c0)
}

/// `β_ε(t)` and `β_ε'(t)`.
pub fn beta_eps(t: f64, settings: &PenaltySettings) -> (f64, f64) {
    settings.beta(t)
}

/// C¹ obstacle smoother: `t` for `t ≥ ε`, `0` for `t ≤ -ε`,
/// `(t + ε)² / (4ε)` in between.
pub fn pi_eps(t: f64, epsilon: f64) -> f64 {
    if t >= epsilon {
        t
    } else if t <= -epsilon {
        0.0
    } else {
        (t + epsilon) * (t + epsilon) / (4.0 * epsilon)
    }
}

/// Derivative of [`pi_eps`] in `t`.
pub fn pi_eps_slope(t: f64, epsilon: f64) -> f64 {
    if t >= epsilon {
        1.0
    } else if t <= -epsilon {
        0.0
    } else {
        (t + epsilon) / (2.0 * epsilon)
    }
}

/// Newton bookkeeping for one implicit step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iterations: usize,
    /// Scaled residual sup-norm before each iteration and after the last one.
    pub residuals: Vec<f64>,
    pub substeps: usize,
}

impl StepReport {
    /// `r_last / r_prev` over the final two Newton residuals, if available.
    pub fn final_ratio(&self) -> Option<f64> {
        let n = self.residuals.len();
        (n >= 2 && self.residuals[n - 2] > 0.0).then(|| self.residuals[n - 1] / self.residuals[n - 2])
    }
}

/// Largest measured excursion of each a-priori estimate. Negative margins mean
/// the estimate holds with room to spare.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub slack: f64,
    pub gradient_slack: f64,
    /// `max(lower - u)`.
    pub lower_excess: f64,
    /// `max(u - upper barrier)`.
    pub upper_excess: f64,
    /// `max(u / upper barrier)`: the empirical envelope against the barrier.
    pub upper_ratio: f64,
    /// `max(-D_x u)` over interior nodes.
    pub gradient_lower_excess: f64,
    /// `max(D_x u - n e^{x + (b-ρcλ)^+ θ})` over interior nodes.
    pub gradient_upper_excess: f64,
    /// `max(-(u_j - u_{j-1}) / Δθ)`.
    pub time_decrease: f64,
}

impl BoundReport {
    pub(crate) fn new(grid: &GridSpec) -> Self {
        Self {
            slack: 10.0 * (grid.dx() + grid.dtheta()),
            gradient_slack: 10.0 * grid.dx(),
            lower_excess: f64::NEG_INFINITY,
            upper_excess: f64::NEG_INFINITY,
            upper_ratio: 0.0,
            gradient_lower_excess: f64::NEG_INFINITY,
            gradient_upper_excess: f64::NEG_INFINITY,
            time_decrease: f64::NEG_INFINITY,
        }
    }

    /// Folds row `j` of `u` into the report. `lower` is the row-wise lower
    /// estimate, `scale` the payoff multiple.
    pub(crate) fn record_row(
        &mut self,
        p: &ModelParams,
        grid: &GridSpec,
        scale: f64,
        u: &[f64],
        lower: &[f64],
        prev: Option<&[f64]>,
        j: usize,
    ) {
        let theta = grid.theta(j);
        let k = p.barrier_constant();
        let growth = p.positive_mmm_drift() * theta;
        let dx = grid.dx();
        let n = u.len();
        for i in 0..n {
            let x = grid.x(i);
            self.lower_excess = self.lower_excess.max(lower[i] - u[i]);
            let barrier = scale * (k * theta + x * x + (x + growth).exp() + 1.0);
            self.upper_excess = self.upper_excess.max(u[i] - barrier);
            self.upper_ratio = self.upper_ratio.max(u[i] / barrier);
            if i > 0 && i + 1 < n {
                let d = (u[i + 1] - u[i - 1]) / (2.0 * dx);
                self.gradient_lower_excess = self.gradient_lower_excess.max(-d);
                self.gradient_upper_excess = self
                    .gradient_upper_excess
                    .max(d - scale * (x + growth).exp());
            }
            if let Some(prev) = prev {
                self.time_decrease = self
                    .time_decrease
                    .max(-(u[i] - prev[i]) / grid.dtheta());
            }
        }
    }

    /// First estimate broken beyond its slack, if any.
    pub fn violation(&self) -> Option<(&'static str, f64)> {
        let checks = [
            ("lower obstacle", self.lower_excess, self.slack),
            ("upper barrier", self.upper_excess, self.slack),
            ("gradient >= 0", self.gradient_lower_excess, self.gradient_slack),
            ("gradient upper bound", self.gradient_upper_excess, self.gradient_slack),
            ("theta-monotonicity", self.time_decrease, self.slack),
        ];
        checks
            .into_iter()
            .find(|&(_, excess, slack)| excess > slack)
            .map(|(name, excess, slack)| (name, excess - slack))
    }
}

/// Output of [`solve_penalized`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedSolution {
    pub surface: Surface,
    pub settings: PenaltySettings,
    pub bounds: BoundReport,
    pub newton_iterations: usize,
    pub max_step_iterations: usize,
    pub substeps: usize,
    /// Worst final-two-iterations residual ratio over steps that needed at
    /// least two Newton iterations.
    pub worst_final_ratio: Option<f64>,
}

/// Implicit-Euler marcher for the penalized problem.
#[derive(Debug, Clone)]
pub struct PenaltySolver {
    params: ModelParams,
    grid: GridSpec,
    settings: PenaltySettings,
    scale: f64,
    problem: LogProblem,
    /// Scaled smoothed obstacle `π_ε(e^z - 1)` in units of `M`.
    smooth_obstacle: Vec<f64>,
    eps_scaled: f64,
    c0_scaled: f64,
    tol_scaled: f64,
}

impl PenaltySolver {
    /// Solver for the payoff `scale (y - K)^+`. The grid must span
    /// `(ln K - N, ln K + N)`.
    pub fn new(params: &ModelParams, grid: &GridSpec, settings: &PenaltySettings, scale: f64) -> Result<Self> {
        grid.validate(params.strike)?;
        let lk = params.log_strike();
        let tol = 1e-9 * (1.0 + settings.n_trunc.abs());
        if (grid.x_min - (lk - settings.n_trunc)).abs() > tol || (grid.x_max - (lk + settings.n_trunc)).abs() > tol {
            return Err(Error::InvalidGrid(format!(
                "grid [{}, {}] must equal (ln K - N, ln K + N) with N = {}",
                grid.x_min, grid.x_max, settings.n_trunc
            )));
        }
        if !(settings.epsilon > 0.0 && settings.c0 >= 0.0 && settings.newton_tol > 0.0) {
            return Err(Error::InvalidParams(format!("invalid penalty settings {settings:?}")));
        }
        let problem = LogProblem::new(params, grid, scale);
        let eps_scaled = settings.epsilon / problem.unit;
        let smooth_obstacle = problem
            .moneyness
            .iter()
            .map(|&m| pi_eps(m, eps_scaled))
            .collect();
        Ok(Self {
            params: *params,
            grid: *grid,
            settings: *settings,
            scale,
            eps_scaled,
            c0_scaled: settings.c0 / problem.unit,
            tol_scaled: settings.newton_tol / problem.unit,
            problem,
            smooth_obstacle,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// `π_ε(n (e^x - K))` on the grid, in currency units.
    pub fn initial_row(&self) -> Vec<f64> {
        self.smooth_obstacle.iter().map(|v| v * self.problem.unit).collect()
    }

    fn penalty(&self, t: f64) -> (f64, f64) {
        self.settings.shape.eval(t, self.eps_scaled, self.c0_scaled)
    }

    fn residual(&self, u: &[f64], prev: &[f64], dtheta: f64, out: &mut [f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..u.len() {
            let (beta, _) = self.penalty(u[i] - self.smooth_obstacle[i]);
            let r = (u[i] - prev[i]) / dtheta - self.problem.apply(u, i) + beta;
            out[i] = r;
            worst = if r.is_finite() { worst.max(r.abs() * dtheta) } else { f64::INFINITY };
        }
        worst
    }

    /// One implicit step of size `dtheta` from a scaled row.
    fn newton_step(&self, prev: &[f64], dtheta: f64, theta_next: f64) -> Result<(Vec<f64>, StepReport)> {
        let n = prev.len();
        let mut u = prev.to_vec();
        let mut r = vec![0.0; n];
        let mut trial_r = vec![0.0; n];
        let (mut lower, mut diag, mut upper) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut report = StepReport::default();
        let mut norm = self.residual(&u, prev, dtheta, &mut r);
        report.residuals.push(norm);
        while norm > self.tol_scaled {
            if report.iterations >= self.settings.newton_max_iter {
                return Err(Error::NewtonDivergence {
                    theta: theta_next,
                    residual: norm * self.problem.unit,
                    iterations: report.iterations,
                });
            }
            for i in 0..n {
                let (lo, di, up) = self.problem.jacobian(&u, i);
                let (_, dbeta) = self.penalty(u[i] - self.smooth_obstacle[i]);
                lower[i] = -lo;
                diag[i] = 1.0 / dtheta - di + dbeta;
                upper[i] = -up;
            }
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let du = tridiag::solve(&lower, &diag, &upper, &rhs)?;
            let mut step = 1.0;
            let mut trial = u.clone();
            loop {
                for i in 0..n {
                    trial[i] = u[i] + step * du[i];
                }
                let tn = self.residual(&trial, prev, dtheta, &mut trial_r);
                if tn < (1.0 - 1e-4 * step) * norm || step < 1e-10 {
                    norm = tn;
                    break;
                }
                step *= 0.5;
            }
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("Newton iterate at theta = {theta_next}")));
            }
            std::mem::swap(&mut u, &mut trial);
            std::mem::swap(&mut r, &mut trial_r);
            report.iterations += 1;
            report.residuals.push(norm);
        }
        Ok((u, report))
    }

    fn step_scaled(&self, prev: &[f64], dtheta: f64, theta_next: f64, depth: u32) -> Result<(Vec<f64>, StepReport)> {
        match self.newton_step(prev, dtheta, theta_next) {
            Ok(out) => Ok(out),
            Err(Error::NewtonDivergence { .. }) | Err(Error::NonFinite(_)) if depth < MAX_SUBSTEP_DEPTH => {
                let half = 0.5 * dtheta;
                let (mid, r1) = self.step_scaled(prev, half, theta_next - half, depth + 1)?;
                let (out, r2) = self.step_scaled(&mid, half, theta_next, depth + 1)?;
                Ok((
                    out,
                    StepReport {
                        iterations: r1.iterations + r2.iterations,
                        residuals: r2.residuals,
                        substeps: r1.substeps + r2.substeps + 1,
                    },
                ))
            }
            Err(e) => Err(e),
        }
    }

    /// Advances a row (currency units) by `dtheta` to `theta_next`.
    pub fn step(&self, prev_row: &[f64], dtheta: f64, theta_next: f64) -> Result<(Vec<f64>, StepReport)> {
        if prev_row.len() != self.grid.n_x || prev_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("previous row is malformed or non-finite".into()));
        }
        let unit = self.problem.unit;
        let prev: Vec<f64> = prev_row.iter().map(|v| v / unit).collect();
        let (u, report) = self.step_scaled(&prev, dtheta, theta_next, 0)?;
        Ok((u.into_iter().map(|v| v * unit).collect(), report))
    }

    /// Full march over the grid with the a-priori estimates checked on every row.
    pub fn solve(&self) -> Result<PenalizedSolution> {
        let g = self.grid;
        let init = self.initial_row();
        let mut surface = Surface::from_initial_row(g, &init);
        let mut bounds = BoundReport::new(&g);
        bounds.record_row(&self.params, &g, self.scale, &init, &init, None, 0);
        let (mut iters, mut max_iters, mut substeps) = (0, 0, 0);
        let mut worst_ratio: Option<f64> = None;
        for j in 1..=g.n_theta {
            let (row, rep) = self.step(surface.row(j - 1), g.dtheta(), g.theta(j))?;
            iters += rep.iterations;
            max_iters = max_iters.max(rep.iterations);
            substeps += rep.substeps;
            if rep.iterations >= 2 {
                if let Some(ratio) = rep.final_ratio() {
                    worst_ratio = Some(worst_ratio.map_or(ratio, |w: f64| w.max(ratio)));
                }
            }
            surface.row_mut(j).copy_from_slice(&row);
            let (prev, cur) = (surface.row(j - 1), surface.row(j));
            bounds.record_row(&self.params, &g, self.scale, cur, &init, Some(prev), j);
            if let Some((name, excess)) = bounds.violation() {
                let i = worst_node(cur, &init);
                return Err(Error::BoundViolation {
                    bound: name,
                    excess,
                    x: g.x(i),
                    theta: g.theta(j),
                });
            }
        }
        if !surface.all_finite() {
            return Err(Error::NonFinite("penalized surface".into()));
        }
        Ok(PenalizedSolution {
            surface,
            settings: self.settings,
            bounds,
            newton_iterations: iters,
            max_step_iterations: max_iters,
            substeps,
            worst_final_ratio: worst_ratio,
        })
    }
}

fn worst_node(u: &[f64], lower: &[f64]) -> usize {
    (0..u.len())
        .max_by(|&a, &b| (lower[a] - u[a]).total_cmp(&(lower[b] - u[b])))
        .unwrap_or(0)
}

/// One implicit-Euler step of the penalized equation from `prev_row` at
/// `theta_next - dtheta` to `theta_next`.
pub fn step_penalized(
    prev_row: &[f64],
    theta_next: f64,
    dtheta: f64,
    settings: &PenaltySettings,
    grid: &GridSpec,
    p: &ModelParams,
) -> Result<Vec<f64>> {
    let solver = PenaltySolver::new(p, grid, settings, 1.0)?;
    solver.step(prev_row, dtheta, theta_next).map(|(row, _)| row)
}

/// Solves the penalized problem on `grid`, which must span `(ln K - N, ln K + N)`.
pub fn solve_penalized(settings: &PenaltySettings, grid: &GridSpec, p: &ModelParams) -> Result<PenalizedSolution> {
    PenaltySolver::new(p, grid, settings, 1.0)?.solve()
}
