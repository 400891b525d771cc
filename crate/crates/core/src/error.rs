use thiserror::Error;

/// Errors raised by the pricing library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("correlation rho = {0} is not admissible: the complete market (rho = 1) is excluded, need 0 <= rho < 1")]
    CompleteMarket(f64),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("point ({x}, {theta}) lies outside the solved window [{x_min}, {x_max}] x [0, {theta_max}]")]
    OutOfDomain {
        x: f64,
        theta: f64,
        x_min: f64,
        x_max: f64,
        theta_max: f64,
    },

    #[error("Newton iteration did not converge at theta = {theta}: residual {residual:e} after {iterations} iterations")]
    NewtonDivergence {
        theta: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("relaxation sweeps did not converge at theta = {theta}: update {update:e} after {sweeps} sweeps")]
    SweepDivergence {
        theta: f64,
        update: f64,
        sweeps: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("a-priori bound `{bound}` violated by {excess:e} at x = {x}, theta = {theta}")]
    BoundViolation {
        bound: &'static str,
        excess: f64,
        x: f64,
        theta: f64,
    },

    #[error("penalty schedule is not Cauchy: successive differences {0:?}")]
    NonCauchySchedule(Vec<f64>),

    #[error("exercise boundary is right-censored at theta = {theta}; widen the pricing grid")]
    CensoredBoundary { theta: f64 },

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("explicit scheme unstable: dtheta = {dtheta} exceeds dx^2/c^2 = {limit}")]
    Cfl { dtheta: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
