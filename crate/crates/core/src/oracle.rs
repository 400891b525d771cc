//! Brute-force references: a recombining binomial tree for the linear
//! (`γ → 0`) limit, a small explicit finite-difference solver for the
//! nonlinear obstacle problem, a lognormal closed form, and re-solve probes
//! for the comparative statics of the price.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::domain::{GridSpec, ModelParams, Surface};
use crate::error::{Error, Result};
use crate::vi::{solve_vi_projected_with, RelaxationSettings, ViSolution};

/// Lattice for `dY = drift Y dt + vol Y dW`, no discounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub n_steps: usize,
    pub drift: f64,
    pub vol: f64,
    pub strike: f64,
    pub maturity: f64,
}

impl TreeSpec {
    /// Tree for the linear limit: drift `b - ρcλ`, volatility `c`.
    pub fn linear_limit(p: &ModelParams, n_steps: usize) -> Self {
        Self {
            n_steps,
            drift: p.mmm_drift(),
            vol: p.vol,
            strike: p.strike,
            maturity: p.maturity,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParams("tree needs at least one step".into()));
        }
        if !(self.vol >= 0.0 && self.strike > 0.0 && self.maturity > 0.0 && self.drift.is_finite()) {
            return Err(Error::InvalidParams(format!("invalid tree {self:?}")));
        }
        Ok(())
    }
}

/// American call on a Cox-Ross-Rubinstein lattice.
pub fn binomial_american(tree: &TreeSpec, y0: f64) -> Result<f64> {
    binomial(tree, y0, true)
}

/// European call on the same lattice.
pub fn binomial_european(tree: &TreeSpec, y0: f64) -> Result<f64> {
    binomial(tree, y0, false)
}

fn binomial(tree: &TreeSpec, y0: f64, american: bool) -> Result<f64> {
    tree.validate()?;
    if !(y0 > 0.0 && y0.is_finite()) {
        return Err(Error::InvalidParams(format!("spot must be > 0, got {y0}")));
    }
    let n = tree.n_steps;
    let dt = tree.maturity / n as f64;
    let k = tree.strike;
    if tree.vol == 0.0 {
        // single deterministic path: exercise at the best date
        let best = (0..=n)
            .filter(|&j| american || j == n)
            .map(|j| (y0 * (tree.drift * j as f64 * dt).exp() - k).max(0.0))
            .fold(0.0, f64::max);
        return Ok(best);
    }
    let up = (tree.vol * dt.sqrt()).exp();
    let down = 1.0 / up;
    let prob = ((tree.drift * dt).exp() - down) / (up - down);
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidParams(format!(
            "tree too coarse: branch probability {prob} outside [0, 1]"
        )));
    }
    let spot = |step: usize, ups: usize| y0 * up.powi(2 * ups as i32 - step as i32);
    let mut values: Vec<f64> = (0..=n).map(|m| (spot(n, m) - k).max(0.0)).collect();
    for step in (0..n).rev() {
        for m in 0..=step {
            let cont = prob * values[m + 1] + (1.0 - prob) * values[m];
            values[m] = if american {
                cont.max(spot(step, m) - k)
            } else {
                cont
            };
        }
    }
    Ok(values[0])
}

/// `E[(Y_T - K)^+]` for `Y` lognormal with drift `drift` and volatility `vol`.
pub fn european_call(y0: f64, strike: f64, drift: f64, vol: f64, maturity: f64) -> f64 {
    let forward = y0 * (drift * maturity).exp();
    if vol * maturity.sqrt() < 1e-14 {
        return (forward - strike).max(0.0);
    }
    let sd = vol * maturity.sqrt();
    let d1 = ((forward / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    forward * n.cdf(d1) - strike * n.cdf(d2)
}

/// Forward-Euler march of the obstacle problem with node-wise projection.
///
/// Written independently of the implicit solvers: its own stencil, ghost
/// nodes for `u_x = 0` on the left and `u_x = e^x` on the right.
pub fn explicit_fd_small(grid: &GridSpec, p: &ModelParams) -> Result<Surface> {
    grid.validate(p.strike)?;
    let h = grid.dx();
    let dt = grid.dtheta();
    let c2 = p.vol * p.vol;
    let limit = h * h / c2;
    if dt > limit {
        return Err(Error::Cfl { dtheta: dt, limit });
    }
    let drift = p.log_drift();
    let q = p.unhedged_variance_aversion();
    let n = grid.n_x;
    let xs = grid.xs();
    let obstacle: Vec<f64> = xs.iter().map(|&x| (x.exp() - p.strike).max(0.0)).collect();
    let right_slope = grid.x_max.exp();
    let mut rows = Vec::with_capacity(grid.n_theta + 1);
    rows.push(obstacle.clone());
    let mut u = obstacle.clone();
    let mut next = vec![0.0; n];
    for _ in 0..grid.n_theta {
        for i in 0..n {
            let left = if i == 0 { u[1] } else { u[i - 1] };
            let right = if i + 1 == n { u[n - 2] + 2.0 * h * right_slope } else { u[i + 1] };
            let ux = (right - left) / (2.0 * h);
            let uxx = (right - 2.0 * u[i] + left) / (h * h);
            let gen = 0.5 * c2 * uxx + drift * ux - 0.5 * q * ux * ux;
            next[i] = (u[i] + dt * gen).max(obstacle[i]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("explicit march".into()));
        }
        std::mem::swap(&mut u, &mut next);
        rows.push(u.clone());
    }
    Surface::from_rows(*grid, &rows)
}

/// Parameter bumps exercised by [`monotonicity_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bumps {
    pub gamma: (f64, f64),
    pub lambda: (f64, f64),
    pub drift: (f64, f64),
    /// Payoff multiple `n` of the sublinearity check.
    pub scale: f64,
}

impl Default for Bumps {
    fn default() -> Self {
        Self {
            gamma: (1.0, 2.0),
            lambda: (0.4, 0.6),
            drift: (0.05, 0.10),
            scale: 2.0,
        }
    }
}

/// One comparative-statics check: the largest node-wise violation of the
/// expected ordering on the inner window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCheck {
    pub name: String,
    pub worst_violation: f64,
    pub slack: f64,
    pub x: f64,
    pub theta: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub checks: Vec<ProbeCheck>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&ProbeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Re-solves at bumped parameters and checks, on the inner 80% of the `x`
/// window: the price does not increase with `γ` or `λ`, does not decrease
/// with `b`, and `n P[g] ≥ P[n g]`.
pub fn monotonicity_probe(p: &ModelParams, bumps: &Bumps, grid: &GridSpec) -> Result<MonotonicityReport> {
    let solve = |q: &ModelParams, scale: f64| {
        solve_vi_projected_with(grid, q, &RelaxationSettings { payoff_scale: scale, ..Default::default() })
    };
    let with = |f: &dyn Fn(&mut ModelParams)| -> Result<ModelParams> {
        let mut q = *p;
        f(&mut q);
        crate::domain::validate_params(q)
    };
    let slack = 10.0 * (grid.dx() + grid.dtheta());
    let mut checks = Vec::new();

    let pairs: [(&str, ModelParams, ModelParams, f64); 3] = [
        (
            "non-increasing in gamma",
            with(&|q| q.risk_aversion = bumps.gamma.0)?,
            with(&|q| q.risk_aversion = bumps.gamma.1)?,
            1.0,
        ),
        (
            "non-increasing in lambda",
            with(&|q| q.sharpe = bumps.lambda.0)?,
            with(&|q| q.sharpe = bumps.lambda.1)?,
            1.0,
        ),
        (
            "non-decreasing in b",
            with(&|q| q.drift = bumps.drift.0)?,
            with(&|q| q.drift = bumps.drift.1)?,
            -1.0,
        ),
    ];
    for (name, lo, hi, sign) in pairs {
        let (a, b) = (solve(&lo, 1.0)?, solve(&hi, 1.0)?);
        // violation of  sign * (P_hi - P_lo) <= 0
        checks.push(compare(name, &a, &b, sign, 1.0, slack));
    }

    let base = solve(p, 1.0)?;
    let scaled = solve(p, bumps.scale)?;
    // violation of  P[n g] - n P[g] <= 0
    checks.push(compare("sublinear in the payoff", &base, &scaled, 1.0, bumps.scale, slack));
    Ok(MonotonicityReport { checks })
}

/// Largest `sign * (b - factor * a)` on the inner 80% window.
fn compare(name: &str, a: &ViSolution, b: &ViSolution, sign: f64, factor: f64, slack: f64) -> ProbeCheck {
    let g = *a.grid();
    let lo = g.n_x / 10;
    let hi = g.n_x - 1 - g.n_x / 10;
    let mut worst = (f64::NEG_INFINITY, 0, 0);
    for j in 0..=g.n_theta {
        for i in lo..=hi {
            let v = sign * (b.surface.get(i, j) - factor * a.surface.get(i, j));
            if v > worst.0 {
                worst = (v, i, j);
            }
        }
    }
    ProbeCheck {
        name: name.to_string(),
        worst_violation: worst.0,
        slack,
        x: g.x(worst.1),
        theta: g.theta(worst.2),
        passed: worst.0 <= slack,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vol_tree_takes_the_best_date() {
        let tree = TreeSpec { n_steps: 10, drift: 0.1, vol: 0.0, strike: 1.0, maturity: 1.0 };
        let v = binomial_american(&tree, 1.0).unwrap();
        assert!((v - (0.1f64.exp() - 1.0)).abs() < 1e-15);
        let down = TreeSpec { drift: -0.1, ..tree };
        assert!((binomial_american(&down, 1.2).unwrap() - 0.2).abs() < 1e-15);
        assert!(binomial_european(&down, 1.2).unwrap() < 0.2);
    }

    #[test]
    fn driftless_american_is_european() {
        let tree = TreeSpec { n_steps: 2000, drift: 0.0, vol: 0.3, strike: 1.0, maturity: 1.0 };
        let a = binomial_american(&tree, 1.0).unwrap();
        let e = european_call(1.0, 1.0, 0.0, 0.3, 1.0);
        assert!((a - binomial_european(&tree, 1.0).unwrap()).abs() < 1e-12);
        // closed form: 2N(0.15) - 1
        assert!((e - 0.119_235_384_7).abs() < 1e-9, "{e}");
        assert!((a - e).abs() < 1e-4, "{a} vs {e}");
    }

    #[test]
    fn doubling_steps_is_stable_after_richardson() {
        let base = TreeSpec { n_steps: 500, drift: -0.01, vol: 0.3, strike: 1.0, maturity: 1.0 };
        let price = |n| binomial_american(&TreeSpec { n_steps: n, ..base }, 1.0).unwrap();
        let r1 = 2.0 * price(1000) - price(500);
        let r2 = 2.0 * price(2000) - price(1000);
        assert!((r1 - r2).abs() < 1e-4, "{r1} vs {r2}");
    }

    #[test]
    fn coarse_tree_with_large_drift_is_rejected() {
        let tree = TreeSpec { n_steps: 1, drift: 5.0, vol: 0.1, strike: 1.0, maturity: 1.0 };
        assert!(binomial_american(&tree, 1.0).is_err());
    }

    #[test]
    fn explicit_fd_respects_obstacle_and_cfl() {
        let p = ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 1.0, 1.0, 1.0).unwrap();
        let g = GridSpec::centered(&p, 2.0, 51, 2000).unwrap();
        let s = explicit_fd_small(&g, &p).unwrap();
        for (i, x) in g.xs().into_iter().enumerate() {
            let psi = (x.exp() - 1.0).max(0.0);
            assert_eq!(s.get(i, 0), psi);
            for j in 0..=g.n_theta {
                assert!(s.get(i, j) >= psi);
            }
        }
        let coarse_time = GridSpec::centered(&p, 2.0, 51, 5).unwrap();
        assert!(matches!(explicit_fd_small(&coarse_time, &p), Err(Error::Cfl { .. })));
    }
}
