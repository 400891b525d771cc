//! Finite-difference form of the forward operator
//!
//! `L u = ½c² u_xx + (b - ρcλ - ½c²) u_x - ½γ(1-ρ²)c² (u_x)²`
//!
//! on a uniform log grid, with Neumann data `u_x = 0` on the left edge and
//! `u_x = e^x` (the payoff slope) on the right edge, eliminated through ghost
//! nodes. Values are carried in units of the payoff scale `M = n K`, in which
//! the obstacle is `(e^z - 1)^+` with `z = x - ln K` and the risk coefficient
//! becomes `½γM(1-ρ²)c²`.

use crate::domain::{GridSpec, ModelParams};

#[derive(Debug, Clone)]
pub(crate) struct LogProblem {
    /// Monetary unit `M`; raw values are `M` times the scaled ones.
    pub unit: f64,
    pub dx: f64,
    pub half_var: f64,
    pub drift: f64,
    pub risk: f64,
    pub left_flux: f64,
    pub right_flux: f64,
    /// Scaled obstacle `(e^z - 1)^+` at every node.
    pub obstacle: Vec<f64>,
    /// Scaled `e^z - 1` at every node.
    pub moneyness: Vec<f64>,
}

impl LogProblem {
    pub fn new(p: &ModelParams, grid: &GridSpec, payoff_scale: f64) -> Self {
        let unit = payoff_scale * p.strike;
        let lk = p.log_strike();
        let moneyness: Vec<f64> = grid.xs().iter().map(|&x| (x - lk).exp() - 1.0).collect();
        let obstacle = moneyness.iter().map(|m| m.max(0.0)).collect();
        Self {
            unit,
            dx: grid.dx(),
            half_var: 0.5 * p.vol * p.vol,
            drift: p.log_drift(),
            risk: 0.5 * p.unhedged_variance_aversion() * unit,
            left_flux: 0.0,
            right_flux: (grid.x_max - lk).exp(),
            obstacle,
            moneyness,
        }
    }

    /// Centered first difference, or the imposed flux at an edge.
    pub fn gradient(&self, u: &[f64], i: usize) -> f64 {
        let n = u.len();
        if i == 0 {
            self.left_flux
        } else if i + 1 == n {
            self.right_flux
        } else {
            (u[i + 1] - u[i - 1]) / (2.0 * self.dx)
        }
    }

    fn second_difference(&self, u: &[f64], i: usize) -> f64 {
        let n = u.len();
        let h = self.dx;
        if i == 0 {
            2.0 * (u[1] - u[0] - h * self.left_flux) / (h * h)
        } else if i + 1 == n {
            2.0 * (u[n - 2] - u[n - 1] + h * self.right_flux) / (h * h)
        } else {
            (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (h * h)
        }
    }

    /// `(L_h u)_i`.
    pub fn apply(&self, u: &[f64], i: usize) -> f64 {
        let g = self.gradient(u, i);
        self.half_var * self.second_difference(u, i) + self.drift * g - self.risk * g * g
    }

    /// Partial derivatives of `(L_h u)_i` with respect to `u[i-1], u[i], u[i+1]`.
    pub fn jacobian(&self, u: &[f64], i: usize) -> (f64, f64, f64) {
        let n = u.len();
        let h = self.dx;
        let diff = self.half_var / (h * h);
        if i == 0 {
            (0.0, -2.0 * diff, 2.0 * diff)
        } else if i + 1 == n {
            (2.0 * diff, -2.0 * diff, 0.0)
        } else {
            let adv = (self.drift - 2.0 * self.risk * self.gradient(u, i)) / (2.0 * h);
            (diff - adv, -2.0 * diff, diff + adv)
        }
    }

    /// Coefficient of `u[i]` in `(L_h u)_i`; the operator is affine in the
    /// centre value because the gradient stencil skips it.
    pub fn centre_coefficient(&self) -> f64 {
        -2.0 * self.half_var / (self.dx * self.dx)
    }

    /// Smallest off-diagonal of the linearised operator over interior nodes.
    /// Non-negative means the stencil is monotone at `u`.
    pub fn monotonicity_margin(&self, u: &[f64]) -> f64 {
        (1..u.len() - 1)
            .map(|i| {
                let (lo, _, up) = self.jacobian(u, i);
                lo.min(up)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoff_row_generator_matches_closed_form_in_exercise_region() {
        // For u = e^z - 1 the continuous generator is (b - rho c lambda) e^z - ½γ(1-ρ²)c² e^{2z}.
        let p = ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 1.0, 1.0, 1.0).unwrap();
        let g = GridSpec::centered(&p, 4.0, 801, 1).unwrap();
        let lp = LogProblem::new(&p, &g, 1.0);
        let u = &lp.obstacle;
        for i in [500usize, 600, 700] {
            let z = g.x(i);
            let exact = p.mmm_drift() * z.exp() - 0.5 * p.unhedged_variance_aversion() * (2.0 * z).exp();
            let got = lp.apply(u, i);
            assert!((got - exact).abs() < 1e-3 * (1.0 + exact.abs()), "{got} vs {exact}");
        }
        // right edge uses the imposed slope, which equals the payoff slope
        let n = g.n_x;
        assert!((lp.gradient(u, n - 1) - g.x_max.exp()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 2.0, 1.0, 1.0).unwrap();
        let g = GridSpec::centered(&p, 2.0, 21, 1).unwrap();
        let lp = LogProblem::new(&p, &g, 1.0);
        let u: Vec<f64> = (0..g.n_x).map(|i| (0.3 * i as f64).sin() + 0.1 * i as f64).collect();
        let h = 1e-6;
        for i in 0..g.n_x {
            let (lo, di, up) = lp.jacobian(&u, i);
            for (k, an) in [(i.wrapping_sub(1), lo), (i, di), (i + 1, up)] {
                if k >= g.n_x {
                    continue;
                }
                let mut a = u.clone();
                let mut b = u.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (lp.apply(&a, i) - lp.apply(&b, i)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "node {i}, wrt {k}: {fd} vs {an}");
            }
        }
    }
}
