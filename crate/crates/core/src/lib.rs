pub mod domain;
pub mod dual;
pub mod error;
pub mod eso;
mod operator;
pub mod oracle;
pub mod penalty;
pub mod pricing;
pub mod selftest;
mod tridiag;
pub mod vi;

pub use domain::{from_forward, payoff, to_forward, validate_params, GridSpec, ModelParams, Surface, ValueQuery};
pub use error::{Error, Result};
pub use pricing::{PriceModel, SolverChoice};
pub use vi::{FreeBoundary, ViSolution};
