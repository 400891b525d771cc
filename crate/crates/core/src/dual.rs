//! Monte-Carlo check of the dual representation of the price,
//!
//! `P(y, 0) = sup_τ inf_φ E^φ[g(Y_τ)] + (1/γ) E^φ[½ ∫₀^τ φ² dt]`,
//!
//! where under the measure indexed by `φ` the asset follows
//! `dY = (b - cρλ - c√(1-ρ²) φ) Y dt + c Y dB`. Paths are simulated directly
//! under that measure, so no likelihood ratios are needed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, ModelParams, Surface};
use crate::error::{Error, Result};
use crate::pricing::{log_gradient, PriceModel};
use crate::vi::FreeBoundary;

/// Paths per independently seeded batch.
const CHUNK: usize = 4096;

/// Density process `φ(y, t)` of the measure change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DualControl {
    Constant(f64),
    /// Piecewise constant on the cells of a log-spot × forward-time grid:
    /// the value at the nearest `x` node and the nearest `θ` row. Spots
    /// outside the window use the edge value.
    Tabulated { values: Surface, maturity: f64 },
}

impl DualControl {
    /// `φ* = γ c √(1-ρ²) y ∂_y P`, the minimiser of the pointwise quadratic
    /// in the pricing equation, read off a solved model.
    pub fn plug_in(model: &PriceModel) -> Self {
        let p = &model.params;
        let factor = p.risk_aversion * p.vol * (1.0 - p.correlation * p.correlation).sqrt();
        Self::Tabulated {
            values: log_gradient(&model.vi).map(|d| factor * d),
            maturity: p.maturity,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DualControl::Constant(v) => format!("constant {v}"),
            DualControl::Tabulated { values, .. } => {
                let g = &values.grid;
                format!(
                    "tabulated on {} log-spot cells over [{}, {}] x {} time cells",
                    g.n_x, g.x_min, g.x_max, g.n_theta + 1
                )
            }
        }
    }

    pub fn eval(&self, y: f64, t: f64) -> f64 {
        match self {
            DualControl::Constant(v) => *v,
            DualControl::Tabulated { values, maturity } => {
                let g: &GridSpec = &values.grid;
                let i = ((y.ln() - g.x_min) / g.dx()).round().clamp(0.0, (g.n_x - 1) as f64) as usize;
                let j = ((maturity - t) / g.dtheta()).round().clamp(0.0, g.n_theta as f64) as usize;
                values.get(i, j)
            }
        }
    }
}

/// When each path stops.
#[derive(Debug, Clone, PartialEq)]
pub enum StoppingRule {
    Immediate,
    AtMaturity,
    /// First monitoring date with `Y ≥ y*(t)`, else maturity. Censored
    /// boundary samples never trigger.
    Boundary(FreeBoundary),
}

impl StoppingRule {
    fn stops(&self, y: f64, t: f64, maturity: f64) -> bool {
        match self {
            StoppingRule::Immediate => true,
            StoppingRule::AtMaturity => false,
            StoppingRule::Boundary(b) => b.at(maturity - t).map(|s| y.ln() >= s).unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

/// Simulated paths, `paths[k][m]` the spot of path `k` at `times[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub times: Vec<f64>,
    pub paths: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub payoff_term: f64,
    /// `E[½ ∫₀^τ φ² dt]`, before division by `γ`.
    pub entropy_term: f64,
    pub mean_stopping_time: f64,
}

struct Stepper<'a> {
    control: &'a DualControl,
    p: &'a ModelParams,
    dt: f64,
    sqrt_dt: f64,
    orth: f64,
}

impl<'a> Stepper<'a> {
    fn new(control: &'a DualControl, p: &'a ModelParams, n_steps: usize) -> Self {
        let dt = p.maturity / n_steps as f64;
        Self {
            control,
            p,
            dt,
            sqrt_dt: dt.sqrt(),
            orth: p.vol * (1.0 - p.correlation * p.correlation).sqrt(),
        }
    }

    /// Advances `y` over one step from time `t`; returns the new spot and `φ`
    /// used on the step.
    fn step(&self, y: f64, t: f64, z: f64) -> (f64, f64) {
        let phi = self.control.eval(y, t);
        let c = self.p.vol;
        let drift = self.p.mmm_drift() - self.orth * phi - 0.5 * c * c;
        ((y.ln() + drift * self.dt + c * self.sqrt_dt * z).exp(), phi)
    }
}

fn check(y0: f64, mc: &McSettings) -> Result<()> {
    if !(y0 > 0.0 && y0.is_finite()) {
        return Err(Error::InvalidParams(format!("spot must be > 0, got {y0}")));
    }
    if mc.n_steps == 0 || mc.n_paths == 0 {
        return Err(Error::InvalidParams("need at least one path and one step".into()));
    }
    Ok(())
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Log-Euler paths of the controlled asset; identical for identical inputs.
pub fn simulate_y_under_control(
    y0: f64,
    control: &DualControl,
    p: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<PathBatch> {
    check(y0, &McSettings { n_paths, n_steps, seed })?;
    let stepper = Stepper::new(control, p, n_steps);
    let times: Vec<f64> = (0..=n_steps).map(|m| m as f64 * stepper.dt).collect();
    let n_chunks = n_paths.div_ceil(CHUNK);
    let paths = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = chunk_rng(seed, chunk);
            let count = CHUNK.min(n_paths - chunk * CHUNK);
            (0..count)
                .map(|_| {
                    let mut path = Vec::with_capacity(n_steps + 1);
                    let mut y = y0;
                    path.push(y);
                    for &t in &times[..n_steps] {
                        y = stepper.step(y, t, StandardNormal.sample(&mut rng)).0;
                        path.push(y);
                    }
                    path
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat();
    Ok(PathBatch { times, paths })
}

/// MC mean of `½ ∫₀^τ φ² dt` over a batch, with `φ` evaluated at the start
/// of every step.
pub fn entropy_penalty(control: &DualControl, batch: &PathBatch, rule: &StoppingRule, p: &ModelParams) -> f64 {
    let n = batch.paths.len().max(1);
    let total: f64 = batch
        .paths
        .iter()
        .map(|path| {
            let mut acc = 0.0;
            for m in 0..batch.times.len() - 1 {
                let t = batch.times[m];
                if rule.stops(path[m], t, p.maturity) {
                    break;
                }
                let phi = control.eval(path[m], t);
                acc += 0.5 * phi * phi * (batch.times[m + 1] - t);
            }
            acc
        })
        .sum();
    total / n as f64
}

/// Index of the stopping date of a path under `rule`.
pub fn stopping_index(path: &[f64], times: &[f64], rule: &StoppingRule, maturity: f64) -> usize {
    let last = times.len() - 1;
    (0..last)
        .find(|&m| rule.stops(path[m], times[m], maturity))
        .unwrap_or(last)
}

#[derive(Default, Clone, Copy)]
struct Sums {
    count: f64,
    /// Running mean and centred second moment of the path values.
    mean: f64,
    m2: f64,
    payoff: f64,
    entropy: f64,
    tau: f64,
}

/// `E^φ[g(Y_τ)] + (1/γ) E^φ[½ ∫₀^τ φ² dt]` with its standard error.
pub fn dual_value(
    y0: f64,
    control: &DualControl,
    rule: &StoppingRule,
    p: &ModelParams,
    mc: &McSettings,
) -> Result<DualEstimate> {
    check(y0, mc)?;
    let stepper = Stepper::new(control, p, mc.n_steps);
    let n_chunks = mc.n_paths.div_ceil(CHUNK);
    let partial: Vec<Sums> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = chunk_rng(mc.seed, chunk);
            let count = CHUNK.min(mc.n_paths - chunk * CHUNK);
            let mut s = Sums::default();
            for _ in 0..count {
                let mut y = y0;
                let mut entropy = 0.0;
                let mut tau = p.maturity;
                for m in 0..mc.n_steps {
                    let t = m as f64 * stepper.dt;
                    if rule.stops(y, t, p.maturity) {
                        tau = t;
                        break;
                    }
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let (next, phi) = stepper.step(y, t, z);
                    entropy += 0.5 * phi * phi * stepper.dt;
                    y = next;
                }
                let payoff = (y - p.strike).max(0.0);
                let v = payoff + entropy / p.risk_aversion;
                s.count += 1.0;
                let delta = v - s.mean;
                s.mean += delta / s.count;
                s.m2 += delta * (v - s.mean);
                s.payoff += payoff;
                s.entropy += entropy;
                s.tau += tau;
            }
            s
        })
        .collect();
    let total = partial.iter().fold(Sums::default(), |a, b| {
        let count = a.count + b.count;
        let delta = b.mean - a.mean;
        Sums {
            count,
            mean: a.mean + delta * b.count / count,
            m2: a.m2 + b.m2 + delta * delta * a.count * b.count / count,
            payoff: a.payoff + b.payoff,
        entropy: a.entropy + b.entropy,
            tau: a.tau + b.tau,
        }
    });
    let n = mc.n_paths as f64;
    let var = if mc.n_paths > 1 { total.m2 / (n - 1.0) } else { 0.0 };
    Ok(DualEstimate {
        value: total.mean,
        std_error: (var / n).sqrt(),
        n_paths: mc.n_paths,
        payoff_term: total.payoff / n,
        entropy_term: total.entropy / n,
        mean_stopping_time: total.tau / n,
    })
}
