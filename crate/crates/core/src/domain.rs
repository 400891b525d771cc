//! Model constants, the `(y, t) <-> (x, theta)` change of variables and the
//! lattice containers shared by every solver.
//!
//! The forward variables are `x = ln y` and `theta = T - t`, so the terminal
//! payoff of the pricing problem becomes the initial row (`theta = 0`) of a
//! forward-in-time problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market and preference constants.
///
/// The non-traded asset follows `dY = b Y dt + c Y dW` with `dW` correlated
/// to the traded asset's noise by `rho`; the traded asset has volatility
/// `sigma` and Sharpe ratio `lambda`; the agent has absolute risk aversion
/// `gamma`. Prices are discounted, so there is no interest rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Drift of the non-traded asset.
    #[serde(rename = "b")]
    pub drift: f64,
    /// Volatility of the non-traded asset.
    #[serde(rename = "c")]
    pub vol: f64,
    /// Correlation between the two assets, in `[0, 1)`.
    #[serde(rename = "rho")]
    pub correlation: f64,
    /// Market price of risk of the traded asset.
    #[serde(rename = "lambda")]
    pub sharpe: f64,
    /// Volatility of the traded asset.
    #[serde(rename = "sigma")]
    pub traded_vol: f64,
    /// Absolute risk aversion.
    #[serde(rename = "gamma")]
    pub risk_aversion: f64,
    pub strike: f64,
    pub maturity: f64,
}

impl ModelParams {
    /// Builds and validates a parameter set.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        drift: f64,
        vol: f64,
        correlation: f64,
        sharpe: f64,
        traded_vol: f64,
        risk_aversion: f64,
        strike: f64,
        maturity: f64,
    ) -> Result<Self> {
        validate_params(Self {
            drift,
            vol,
            correlation,
            sharpe,
            traded_vol,
            risk_aversion,
            strike,
            maturity,
        })
    }

    /// Drift of the non-traded asset under the minimal martingale measure,
    /// `b - rho c lambda`.
    pub fn mmm_drift(&self) -> f64 {
        self.drift - self.correlation * self.vol * self.sharpe
    }

    /// Coefficient `gamma (1 - rho^2) c^2` of the unhedgeable-risk term.
    pub fn unhedged_variance_aversion(&self) -> f64 {
        self.risk_aversion * (1.0 - self.correlation * self.correlation) * self.vol * self.vol
    }

    /// Drift of `x = ln y` under the minimal martingale measure.
    pub fn log_drift(&self) -> f64 {
        self.mmm_drift() - 0.5 * self.vol * self.vol
    }

    /// `(b - rho c lambda)^+`, the growth rate appearing in the a-priori bounds.
    pub fn positive_mmm_drift(&self) -> f64 {
        self.mmm_drift().max(0.0)
    }

    /// Constant `k` of the upper barrier `k theta + x^2 + e^{x + (b - rho c lambda)^+ theta} + 1`.
    pub fn barrier_constant(&self) -> f64 {
        let q = self.unhedged_variance_aversion();
        let c2 = self.vol * self.vol;
        let d = self.log_drift();
        let growth = (self.positive_mmm_drift() * self.maturity).exp();
        let first = c2 + d * d / (2.0 * q);
        let second = c2 + (q * growth - d).powi(2) / (2.0 * q);
        first.max(second)
    }

    pub fn log_strike(&self) -> f64 {
        self.strike.ln()
    }

    /// Copy with a different risk aversion; re-validated.
    pub fn with_risk_aversion(self, gamma: f64) -> Result<Self> {
        validate_params(Self {
            risk_aversion: gamma,
            ..self
        })
    }
}

/// Checks assumption set of the model: positive `c, sigma, gamma, K, T`,
/// `0 <= rho < 1` and finite drift/Sharpe ratio.
pub fn validate_params(p: ModelParams) -> Result<ModelParams> {
    let positive = [
        ("c", p.vol),
        ("sigma", p.traded_vol),
        ("gamma", p.risk_aversion),
        ("strike", p.strike),
        ("maturity", p.maturity),
    ];
    for (name, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParams(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    if !p.drift.is_finite() || !p.sharpe.is_finite() {
        return Err(Error::InvalidParams(format!(
            "b and lambda must be finite, got b = {}, lambda = {}",
            p.drift, p.sharpe
        )));
    }
    if !p.correlation.is_finite() || p.correlation < 0.0 {
        return Err(Error::InvalidParams(format!(
            "rho must lie in [0, 1), got {}",
            p.correlation
        )));
    }
    if p.correlation >= 1.0 {
        return Err(Error::CompleteMarket(p.correlation));
    }
    Ok(p)
}

/// Maps `(y, t)` to `(x, theta) = (ln y, T - t)`.
pub fn to_forward(y: f64, t: f64, p: &ModelParams) -> Result<(f64, f64)> {
    if !(y.is_finite() && y > 0.0) {
        return Err(Error::InvalidParams(format!("spot must be > 0, got {y}")));
    }
    if !(0.0..=p.maturity).contains(&t) {
        return Err(Error::InvalidParams(format!(
            "time must lie in [0, {}], got {t}",
            p.maturity
        )));
    }
    Ok((y.ln(), p.maturity - t))
}

/// Inverse of [`to_forward`].
pub fn from_forward(x: f64, theta: f64, p: &ModelParams) -> Result<(f64, f64)> {
    if !(0.0..=p.maturity).contains(&theta) {
        return Err(Error::InvalidParams(format!(
            "theta must lie in [0, {}], got {theta}",
            p.maturity
        )));
    }
    Ok((x.exp(), p.maturity - theta))
}

/// Call payoff `(e^x - K)^+` in log coordinates.
pub fn payoff(x: f64, strike: f64) -> f64 {
    (x.exp() - strike).max(0.0)
}

/// Uniform lattice in `x = ln y` and forward time `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_theta: usize,
    pub theta_max: f64,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, n_x: usize, n_theta: usize, theta_max: f64) -> Result<Self> {
        let g = Self {
            x_min,
            x_max,
            n_x,
            n_theta,
            theta_max,
        };
        g.check_shape()?;
        Ok(g)
    }

    /// Grid of `n_x` nodes on `[ln K - half_width, ln K + half_width]`.
    /// With odd `n_x` the strike sits exactly on the middle node.
    pub fn centered(p: &ModelParams, half_width: f64, n_x: usize, n_theta: usize) -> Result<Self> {
        let lk = p.log_strike();
        let g = Self::new(lk - half_width, lk + half_width, n_x, n_theta, p.maturity)?;
        g.snapped_to_strike(p.strike)
    }

    fn check_shape(&self) -> Result<()> {
        if self.n_x < 3 {
            return Err(Error::InvalidGrid(format!("n_x must be >= 3, got {}", self.n_x)));
        }
        if self.n_theta < 1 {
            return Err(Error::InvalidGrid("n_theta must be >= 1".into()));
        }
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            return Err(Error::InvalidGrid(format!(
                "need finite x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if !(self.theta_max.is_finite() && self.theta_max > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "theta_max must be > 0, got {}",
                self.theta_max
            )));
        }
        Ok(())
    }

    /// Checks the shape and that the payoff kink `ln K` is interior.
    pub fn validate(&self, strike: f64) -> Result<()> {
        self.check_shape()?;
        let lk = strike.ln();
        if !(self.x_min < lk && lk < self.x_max) {
            return Err(Error::InvalidGrid(format!(
                "ln K = {lk} must lie strictly inside [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dtheta(&self) -> f64 {
        self.theta_max / self.n_theta as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n_x {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn theta(&self, j: usize) -> f64 {
        if j == self.n_theta {
            self.theta_max
        } else {
            j as f64 * self.dtheta()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_x).map(|i| self.x(i)).collect()
    }

    /// Index of the node nearest to `ln K`.
    pub fn kink_index(&self, strike: f64) -> usize {
        let r = (strike.ln() - self.x_min) / self.dx();
        (r.round().max(0.0) as usize).min(self.n_x - 1)
    }

    /// Translates the grid by less than half a cell so that `ln K` falls
    /// exactly on a node. Spacing and node count are unchanged.
    pub fn snapped_to_strike(&self, strike: f64) -> Result<Self> {
        self.validate(strike)?;
        let dx = self.dx();
        let k = self.kink_index(strike);
        let shift = strike.ln() - (self.x_min + k as f64 * dx);
        let snapped = Self {
            x_min: self.x_min + shift,
            x_max: self.x_max + shift,
            ..*self
        };
        snapped.validate(strike)?;
        Ok(snapped)
    }

    /// True when `x` lies in `[x_min, x_max]` (up to rounding).
    pub fn contains_x(&self, x: f64) -> bool {
        let tol = 1e-12 * (1.0 + self.x_max.abs().max(self.x_min.abs()));
        x >= self.x_min - tol && x <= self.x_max + tol
    }
}

/// A scalar field sampled on a [`GridSpec`]: `n_theta + 1` rows of `n_x`
/// values, row `j` holding the field at `theta_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub grid: GridSpec,
    values: Vec<f64>,
}

impl Surface {
    /// Surface with every row equal to `initial`.
    pub fn from_initial_row(grid: GridSpec, initial: &[f64]) -> Self {
        assert_eq!(initial.len(), grid.n_x, "initial row has wrong length");
        let mut values = Vec::with_capacity(grid.n_x * (grid.n_theta + 1));
        for _ in 0..=grid.n_theta {
            values.extend_from_slice(initial);
        }
        Self { grid, values }
    }

    pub fn from_rows(grid: GridSpec, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != grid.n_theta + 1 || rows.iter().any(|r| r.len() != grid.n_x) {
            return Err(Error::InvalidGrid("row layout does not match grid".into()));
        }
        Ok(Self {
            grid,
            values: rows.concat(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_theta + 1
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.grid.n_x;
        &self.values[j * n..(j + 1) * n]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.grid.n_x;
        &mut self.values[j * n..(j + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.grid.n_x)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.n_x + i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear interpolation at `(x, theta)`; no extrapolation.
    pub fn interpolate(&self, x: f64, theta: f64) -> Result<f64> {
        let (i, wx, j, wt) = self.locate(x, theta)?;
        let v = |ii: usize, jj: usize| self.get(ii, jj);
        let lo = (1.0 - wx) * v(i, j) + wx * v(i + 1, j);
        let hi = (1.0 - wx) * v(i, j + 1) + wx * v(i + 1, j + 1);
        Ok((1.0 - wt) * lo + wt * hi)
    }

    /// Cell containing `(x, theta)` and the fractional offsets within it.
    pub(crate) fn locate(&self, x: f64, theta: f64) -> Result<(usize, f64, usize, f64)> {
        let g = &self.grid;
        let ttol = 1e-12 * (1.0 + g.theta_max);
        if !g.contains_x(x) || !(theta >= -ttol && theta <= g.theta_max + ttol) || !x.is_finite() {
            return Err(Error::OutOfDomain {
                x,
                theta,
                x_min: g.x_min,
                x_max: g.x_max,
                theta_max: g.theta_max,
            });
        }
        let rx = ((x - g.x_min) / g.dx()).clamp(0.0, (g.n_x - 1) as f64);
        let i = (rx.floor() as usize).min(g.n_x - 2);
        let rt = (theta / g.dtheta()).clamp(0.0, g.n_theta as f64);
        let j = (rt.floor() as usize).min(g.n_theta - 1);
        Ok((i, rx - i as f64, j, rt - j as f64))
    }

    /// Largest absolute node-wise difference to `other` (same grid).
    pub fn sup_diff(&self, other: &Surface) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "surfaces on different grids");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Arguments of the value function `V(w, y, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueQuery {
    pub wealth: f64,
    pub spot: f64,
    pub time: f64,
}

impl ValueQuery {
    pub fn new(wealth: f64, spot: f64, time: f64, p: &ModelParams) -> Result<Self> {
        if !wealth.is_finite() {
            return Err(Error::InvalidParams(format!("wealth must be finite, got {wealth}")));
        }
        to_forward(spot, time, p)?;
        Ok(Self { wealth, spot, time })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> ModelParams {
        ModelParams::new(0.0, 0.3, 0.5, 0.4, 0.2, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn accepts_admissible_params() {
        let p = reference();
        assert_eq!(validate_params(p).unwrap(), p);
    }

    #[test]
    fn rejects_complete_market() {
        let p = ModelParams {
            correlation: 1.0,
            ..reference()
        };
        let err = validate_params(p).unwrap_err();
        assert_eq!(err, Error::CompleteMarket(1.0));
        assert!(err.to_string().contains("complete market"));
    }

    #[test]
    fn rejects_non_positive_constants() {
        for bad in [
            ModelParams { risk_aversion: 0.0, ..reference() },
            ModelParams { vol: -0.1, ..reference() },
            ModelParams { traded_vol: 0.0, ..reference() },
            ModelParams { strike: 0.0, ..reference() },
            ModelParams { maturity: 0.0, ..reference() },
            ModelParams { correlation: -0.2, ..reference() },
            ModelParams { drift: f64::NAN, ..reference() },
        ] {
            assert!(validate_params(bad).is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn forward_transform_examples() {
        let p = ModelParams { strike: 1.7, ..reference() };
        assert_eq!(to_forward(1.0, p.maturity, &p).unwrap(), (0.0, 0.0));
        let (x, th) = to_forward(p.strike, 0.0, &p).unwrap();
        assert_eq!((x, th), (p.strike.ln(), p.maturity));
        let (x, th) = to_forward(2f64.exp(), 0.5, &p).unwrap();
        assert!((x - 2.0).abs() < 1e-15 && th == 0.5);
        assert!(to_forward(0.0, 0.5, &p).is_err());
        assert!(to_forward(-1.0, 0.5, &p).is_err());
    }

    #[test]
    fn backward_transform_examples() {
        let p = ModelParams { strike: 1.7, ..reference() };
        assert_eq!(from_forward(0.0, 0.0, &p).unwrap(), (1.0, p.maturity));
        let (y, t) = from_forward(p.strike.ln(), p.maturity, &p).unwrap();
        assert!((y - p.strike).abs() < 1e-14 && t == 0.0);
        assert!(from_forward(0.0, 1.5, &p).is_err());
        assert!(from_forward(0.0, -0.1, &p).is_err());
    }

    #[test]
    fn payoff_examples() {
        let k: f64 = 1.3;
        assert_eq!(payoff(k.ln(), k), 0.0);
        assert!((payoff((2.0 * k).ln(), k) - k).abs() < 1e-14);
        assert_eq!(payoff(-800.0, k), 0.0);
        assert_eq!(payoff(f64::NEG_INFINITY, k), 0.0);
    }

    #[test]
    fn snapping_places_strike_on_a_node() {
        let p = ModelParams { strike: 1.37, ..reference() };
        let g = GridSpec::new(-3.9, 4.2, 200, 10, 1.0).unwrap();
        let s = g.snapped_to_strike(p.strike).unwrap();
        let k = s.kink_index(p.strike);
        assert!((s.x(k) - p.strike.ln()).abs() < 1e-14);
        assert!((s.dx() - g.dx()).abs() < 1e-14);
        assert!((s.x_min - g.x_min).abs() <= 0.5 * g.dx() + 1e-15);

        let c = GridSpec::centered(&p, 4.0, 401, 400).unwrap();
        assert_eq!(c.kink_index(p.strike), 200);
        assert!((c.dx() - 0.02).abs() < 1e-14);
    }

    #[test]
    fn grid_requires_interior_kink() {
        let g = GridSpec::new(0.5, 2.0, 11, 4, 1.0).unwrap();
        assert!(g.validate(1.0).is_err());
        assert!(GridSpec::new(0.0, 1.0, 2, 4, 1.0).is_err());
        assert!(GridSpec::new(0.0, 1.0, 5, 0, 1.0).is_err());
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_rejects_outside() {
        let g = GridSpec::new(-1.0, 1.0, 5, 2, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|j| (0..5).map(|i| (i * 10 + j) as f64).collect())
            .collect();
        let s = Surface::from_rows(g, &rows).unwrap();
        assert_eq!(s.interpolate(g.x(3), g.theta(1)).unwrap(), 31.0);
        assert_eq!(s.interpolate(g.x_max, g.theta_max).unwrap(), 42.0);
        let mid = s.interpolate(0.5 * (g.x(1) + g.x(2)), 0.25).unwrap();
        assert!((mid - 15.5).abs() < 1e-12);
        assert!(s.interpolate(1.2, 0.5).is_err());
        assert!(s.interpolate(0.0, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn transforms_are_inverse(x in -4.0f64..4.0, theta in 0.0f64..1.0) {
            let p = reference();
            let (y, t) = from_forward(x, theta, &p).unwrap();
            let (x2, th2) = to_forward(y, t, &p).unwrap();
            prop_assert!((x2 - x).abs() <= 1e-12);
            prop_assert!((th2 - theta).abs() <= 1e-12);
        }

        #[test]
        fn payoff_monotone_and_lipschitz(a in -5.0f64..5.0, b in -5.0f64..5.0, k in 0.1f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(payoff(lo, k) <= payoff(hi, k));
            prop_assert!(payoff(hi, k) - payoff(lo, k) <= hi.exp() - lo.exp() + 1e-12);
            prop_assert!(payoff(lo, k) >= 0.0);
        }
    }

    #[test]
    fn round_trip_thousand_points() {
        use rand::{Rng, SeedableRng};
        let p = reference();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = rng.gen_range(-4.0..4.0);
            let th = rng.gen_range(0.0..=p.maturity);
            let (y, t) = from_forward(x, th, &p).unwrap();
            let (x2, th2) = to_forward(y, t, &p).unwrap();
            assert!((x2 - x).abs() <= 1e-12 && (th2 - th).abs() <= 1e-12);
        }
    }
}
