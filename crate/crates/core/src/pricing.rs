//! Indifference price, value function, optimal hedge and exercise boundary
//! read off a solved obstacle problem.

use serde::{Deserialize, Serialize};

use crate::domain::{to_forward, GridSpec, ModelParams, Surface, ValueQuery};
use crate::error::{Error, Result};
use crate::penalty::BoundReport;
use crate::vi::{
    extract_boundary, solve_vi_penalty_with, solve_vi_projected_with, ContinuationSettings, FreeBoundary,
    RelaxationSettings, ViSolution,
};

/// Which obstacle solver backs a [`PriceModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Projected(RelaxationSettings),
    Penalty(ContinuationSettings),
}

impl Default for SolverChoice {
    fn default() -> Self {
        SolverChoice::Projected(RelaxationSettings::default())
    }
}

/// Exponential forward performance `U_t(w) = -exp(-γw + ½λ²t)`.
pub fn forward_performance(w: f64, t: f64, p: &ModelParams) -> f64 {
    -(-p.risk_aversion * w + 0.5 * p.sharpe * p.sharpe * t).exp()
}

/// Wealth `w` with `U_t(w) = utility`; `utility` must be negative.
pub fn inverse_forward_performance(utility: f64, t: f64, p: &ModelParams) -> Result<f64> {
    if !(utility < 0.0 && utility.is_finite()) {
        return Err(Error::InvalidParams(format!("utility must be finite and < 0, got {utility}")));
    }
    Ok((0.5 * p.sharpe * p.sharpe * t - (-utility).ln()) / p.risk_aversion)
}

/// Immutable pricing state: parameters, the obstacle solution and its boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceModel {
    pub params: ModelParams,
    pub vi: ViSolution,
    pub boundary: FreeBoundary,
}

impl PriceModel {
    /// Solves with projected relaxation on `grid`, whose `theta_max` must be
    /// the maturity.
    pub fn build(p: &ModelParams, grid: &GridSpec) -> Result<Self> {
        Self::build_with(p, grid, &SolverChoice::default())
    }

    pub fn build_with(p: &ModelParams, grid: &GridSpec, solver: &SolverChoice) -> Result<Self> {
        if (grid.theta_max - p.maturity).abs() > 1e-12 * (1.0 + p.maturity) {
            return Err(Error::InvalidGrid(format!(
                "grid theta_max = {} must equal the maturity {}",
                grid.theta_max, p.maturity
            )));
        }
        let vi = match solver {
            SolverChoice::Projected(s) => solve_vi_projected_with(grid, p, s)?,
            SolverChoice::Penalty(s) => solve_vi_penalty_with(grid, p, s)?,
        };
        Ok(Self::from_solution(p, vi))
    }

    pub fn from_solution(p: &ModelParams, vi: ViSolution) -> Self {
        let boundary = extract_boundary(&vi, p);
        Self {
            params: *p,
            vi,
            boundary,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.vi.grid()
    }

    pub fn surface(&self) -> &Surface {
        &self.vi.surface
    }

    /// Measured excursions of the a-priori estimates over the whole surface.
    pub fn bounds(&self) -> &BoundReport {
        &self.vi.diagnostics.bounds
    }

    /// Upper estimate `k(T - t) + (ln y)² + y e^{(b-ρcλ)^+ (T-t)} + 1` of the price.
    pub fn upper_estimate(&self, y: f64, t: f64) -> f64 {
        let p = &self.params;
        let tau = p.maturity - t;
        let n = self.vi.payoff_scale;
        n * (p.barrier_constant() * tau + y.ln().powi(2) + y * (p.positive_mmm_drift() * tau).exp() + 1.0)
    }

    /// `P(y, t)`.
    pub fn price(&self, y: f64, t: f64) -> Result<f64> {
        let (x, theta) = to_forward(y, t, &self.params)?;
        self.vi.surface.interpolate(x, theta)
    }

    /// `V(w, y, t) = U_t(w + P(y, t))`.
    pub fn value(&self, q: &ValueQuery) -> Result<f64> {
        let price = self.price(q.spot, q.time)?;
        Ok(forward_performance(q.wealth + price, q.time, &self.params))
    }

    /// Optimal amount held in the traded asset.
    pub fn hedge(&self, y: f64, t: f64) -> Result<f64> {
        HedgePolicy::new(self).hedge(y, t)
    }

    /// `y*(t) = exp(s(T - t))`.
    pub fn exercise_boundary(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.params.maturity).contains(&t) {
            return Err(Error::InvalidParams(format!(
                "time must lie in [0, {}], got {t}",
                self.params.maturity
            )));
        }
        Ok(self.boundary.at(self.params.maturity - t)?.exp())
    }
}

/// `P(y, t)` by bilinear interpolation of the solved surface.
pub fn indifference_price(y: f64, t: f64, model: &PriceModel) -> Result<f64> {
    model.price(y, t)
}

pub fn value_function(q: &ValueQuery, model: &PriceModel) -> Result<f64> {
    model.value(q)
}

/// `π* = -(ρc/σ) y ∂_y P + λ/(σγ)`.
pub fn hedge_ratio(y: f64, t: f64, model: &PriceModel) -> Result<f64> {
    model.hedge(y, t)
}

pub fn exercise_boundary(t: f64, model: &PriceModel) -> Result<f64> {
    model.exercise_boundary(t)
}

/// Optimal hedge with `y ∂_y P = ∂_x u` cached on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgePolicy {
    params: ModelParams,
    /// Centred differences of `u` in `x`; the imposed slopes at the edges.
    log_gradient: Surface,
}

impl HedgePolicy {
    pub fn new(model: &PriceModel) -> Self {
        Self {
            params: model.params,
            log_gradient: log_gradient(&model.vi),
        }
    }

    /// `y ∂_y P(y, t)`.
    pub fn spot_delta(&self, y: f64, t: f64) -> Result<f64> {
        let (x, theta) = to_forward(y, t, &self.params)?;
        self.log_gradient.interpolate(x, theta)
    }

    pub fn hedge(&self, y: f64, t: f64) -> Result<f64> {
        let p = &self.params;
        let merton = p.sharpe / (p.traded_vol * p.risk_aversion);
        Ok(-(p.correlation * p.vol / p.traded_vol) * self.spot_delta(y, t)? + merton)
    }

    pub fn gradient_surface(&self) -> &Surface {
        &self.log_gradient
    }
}

/// `∂_x u` on the grid of a solution.
pub fn log_gradient(sol: &ViSolution) -> Surface {
    let g = *sol.grid();
    let n = g.n_x;
    let dx = g.dx();
    let right_slope = sol.payoff_scale * g.x_max.exp();
    let rows: Vec<Vec<f64>> = sol
        .surface
        .rows()
        .map(|u| {
            (0..n)
                .map(|i| {
                    if i == 0 {
                        0.0
                    } else if i + 1 == n {
                        right_slope
                    } else {
                        (u[i + 1] - u[i - 1]) / (2.0 * dx)
                    }
                })
                .collect()
        })
        .collect();
    Surface::from_rows(g, &rows).expect("gradient keeps the row layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 1.0, 1.0, 1.0).unwrap()
    }

    fn model() -> PriceModel {
        let p = params();
        let g = GridSpec::centered(&p, 3.0, 121, 60).unwrap();
        PriceModel::build(&p, &g).unwrap()
    }

    #[test]
    fn forward_performance_examples() {
        let p = params();
        assert_eq!(forward_performance(0.0, 0.0, &p), -1.0);
        let p0 = ModelParams { sharpe: 0.0, ..p };
        let w: f64 = 0.7;
        assert!((forward_performance(w, 0.4, &p0) + (-w).exp()).abs() < 1e-15);
        for &(w, t) in &[(-3.0, 0.0), (0.0, 0.5), (2.5, 1.0), (10.0, 0.2)] {
            let u = forward_performance(w, t, &p);
            assert!(u < 0.0);
            let back = inverse_forward_performance(u, t, &p).unwrap();
            assert!((back - w).abs() < 1e-12, "{back} vs {w}");
        }
        assert!(inverse_forward_performance(0.0, 0.0, &p).is_err());
    }

    #[test]
    fn forward_performance_increasing_concave() {
        let p = params();
        let f = |w: f64| forward_performance(w, 0.3, &p);
        for k in -20..20 {
            let w = k as f64 * 0.25;
            let h = 1e-3;
            assert!(f(w + h) > f(w));
            assert!(f(w + h) - 2.0 * f(w) + f(w - h) < 0.0);
        }
    }

    #[test]
    fn terminal_price_is_intrinsic_at_nodes() {
        let m = model();
        let g = *m.grid();
        for i in (0..g.n_x).step_by(7) {
            let y = g.x(i).exp();
            let price = m.price(y, 1.0).unwrap();
            assert!((price - (y - 1.0).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn price_dominates_payoff_and_decreases_in_time() {
        let m = model();
        for &y in &[0.3, 0.8, 1.0, 1.2, 2.0, 5.0] {
            let mut last = f64::INFINITY;
            for k in 0..=10 {
                let t = k as f64 * 0.1;
                let price = m.price(y, t).unwrap();
                assert!(price >= (y - 1.0f64).max(0.0) - 1e-12);
                assert!(price <= m.upper_estimate(y, t));
                assert!(price <= last + 1e-12);
                last = price;
            }
        }
    }

    #[test]
    fn out_of_window_queries_fail() {
        let m = model();
        assert!(matches!(m.price(1e-3, 0.5), Err(Error::OutOfDomain { .. })));
        assert!(matches!(m.price(100.0, 0.5), Err(Error::OutOfDomain { .. })));
        assert!(m.price(1.0, 1.5).is_err());
        assert!(m.price(-1.0, 0.5).is_err());
    }

    #[test]
    fn value_function_structure() {
        let m = model();
        let p = m.params;
        let (y, t) = (1.1, 0.4);
        let v = m.value(&ValueQuery::new(0.3, y, t, &p).unwrap()).unwrap();
        let shifted = m.value(&ValueQuery::new(0.8, y, t, &p).unwrap()).unwrap();
        assert!((shifted - v * (-p.risk_aversion * 0.5f64).exp()).abs() < 1e-14);
        assert!(v < 0.0);
        let floor = forward_performance(0.3 + (y - 1.0f64).max(0.0), t, &p);
        assert!(v >= floor);
        let node = m.grid().x(75).exp();
        let terminal = m.value(&ValueQuery::new(0.3, node, 1.0, &p).unwrap()).unwrap();
        let expected = forward_performance(0.3 + node - 1.0, 1.0, &p);
        assert!((terminal - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn hedge_is_merton_without_correlation() {
        let p = ModelParams { correlation: 0.0, ..params() };
        let g = GridSpec::centered(&p, 3.0, 61, 30).unwrap();
        let m = PriceModel::build(&p, &g).unwrap();
        let merton = p.sharpe / (p.traded_vol * p.risk_aversion);
        for &y in &[0.2, 1.0, 3.0] {
            assert_eq!(m.hedge(y, 0.5).unwrap(), merton);
        }
    }

    #[test]
    fn deep_out_of_the_money_hedge_is_merton() {
        let m = model();
        let p = m.params;
        let merton = p.sharpe / (p.traded_vol * p.risk_aversion);
        let h = m.hedge((-2.8f64).exp(), 0.0).unwrap();
        assert!((h - merton).abs() < 1e-3, "{h} vs {merton}");
    }

    #[test]
    fn boundary_limits() {
        let m = model();
        let y_short = m.exercise_boundary(1.0).unwrap();
        assert!((y_short.ln() - crate::vi::x0_limit(&m.params)).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let y = m.exercise_boundary(k as f64 * 0.05).unwrap();
            assert!(y <= last + 1e-12);
            last = y;
        }
        assert!(m.exercise_boundary(1.5).is_err());
    }

    #[test]
    fn rejects_grid_with_wrong_horizon() {
        let p = params();
        let g = GridSpec::new(-2.0, 2.0, 41, 10, 0.5).unwrap();
        assert!(matches!(PriceModel::build(&p, &g), Err(Error::InvalidGrid(_))));
    }
}
