//! Invariant suite run by `indiff selftest`: every check reports the measured
//! quantity against its threshold so that failures carry their margin.

use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, ModelParams, Surface};
use crate::dual::{dual_value, DualControl, McSettings, StoppingRule};
use crate::eso::{solve_eso, solve_pre_vesting, EsoSpec};
use crate::error::Result;
use crate::oracle::{binomial_american, european_call, explicit_fd_small, monotonicity_probe, Bumps, TreeSpec};
use crate::pricing::{HedgePolicy, PriceModel};
use crate::vi::{default_schedule, solve_vi_penalty, solve_vi_projected, ScheduleEntry};

/// Inputs of the suite. [`SelftestConfig::reference`] is the desk-scale
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestConfig {
    pub params: ModelParams,
    pub grid: GridSpec,
    /// Empty means the default schedule for the grid.
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
    /// Small grid for the explicit reference solver.
    pub explicit_grid: GridSpec,
    pub tree_steps: usize,
    pub linear_gamma: f64,
    pub bumps: Bumps,
    pub mc: McSettings,
    pub eso_alphas: Vec<f64>,
    pub vesting: f64,
}

impl SelftestConfig {
    /// `b = 0.05, c = 0.3, ρ = 0.5, λ = 0.4, σ = 0.25, γ = 1, K = 1, T = 1`
    /// on `[ln K - 4, ln K + 4]` with 401 nodes and 400 steps.
    pub fn reference() -> Self {
        let params = ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 1.0, 1.0, 1.0).expect("reference parameters");
        Self::for_params(params, 4.0, 401, 400).expect("reference grid")
    }

    /// Suite around `params` on a centred grid, other settings at their defaults.
    pub fn for_params(params: ModelParams, half_width: f64, n_x: usize, n_theta: usize) -> Result<Self> {
        Ok(Self {
            params,
            grid: GridSpec::centered(&params, half_width, n_x, n_theta)?,
            schedule: Vec::new(),
            explicit_grid: GridSpec::centered(&params, 1.0, 51, 2000)?,
            tree_steps: 2000,
            linear_gamma: 1e-3,
            bumps: Bumps::default(),
            mc: McSettings { n_paths: 100_000, n_steps: n_theta, seed: 1 },
            eso_alphas: vec![0.0, 0.1, 0.5],
            vesting: 0.5 * params.maturity,
        })
    }
}

/// One named invariant: passes when `measured <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub group: String,
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn group(&self, group: &str) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.group == group).collect()
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Check groups, in report order.
pub const GROUPS: [&str; 11] = [
    "obstacle",
    "bounds",
    "time-monotonicity",
    "boundary",
    "truncation",
    "method-agreement",
    "linear-limit",
    "comparative-statics",
    "hedge",
    "dual",
    "employee-option",
];

#[derive(Default)]
struct Collector {
    checks: Vec<Check>,
}

impl Collector {
    fn push(&mut self, group: &str, name: &str, measured: f64, threshold: f64) {
        self.checks.push(Check {
            group: group.to_string(),
            name: name.to_string(),
            measured,
            threshold,
            passed: measured <= threshold,
        });
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Runs every check. Solver failures abort the suite with the error.
pub fn run_selftest(cfg: &SelftestConfig) -> Result<SelftestReport> {
    let p = &cfg.params;
    let g = &cfg.grid;
    let dx = g.dx();
    let slack = 10.0 * (dx + g.dtheta());
    let mut out = Collector::default();

    let model = PriceModel::build(p, g)?;
    let vi = &model.vi;
    let u = &vi.surface;
    let atm = g.kink_index(p.strike);

    // obstacle and initial row
    let terminal = u.row(0).iter().zip(&vi.obstacle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push("obstacle", "initial row equals payoff", terminal, 0.0);
    out.push("obstacle", "payoff minus value", -vi.obstacle_margin(), 1e-12);
    out.push(
        "obstacle",
        "complementarity residual",
        vi.diagnostics.complementarity,
        vi.diagnostics.complementarity_tol,
    );

    // a-priori estimates
    let b = model.bounds();
    out.push("bounds", "value below upper barrier", b.upper_excess, slack);
    out.push("bounds", "value above payoff", b.lower_excess, slack);
    out.push("bounds", "log-gradient non-negative", b.gradient_lower_excess, 10.0 * dx);
    out.push("bounds", "log-gradient below growth bound", b.gradient_upper_excess, 10.0 * dx);

    out.push("time-monotonicity", "decrease in theta", b.time_decrease, 1e-10);

    // exercise boundary
    let fb = &model.boundary;
    match fb.s_values.first().copied().flatten() {
        Some(s1) => out.push("boundary", "first sample distance to x0", (s1 - fb.x0).abs(), 2.0 * dx),
        None => out.push("boundary", "first sample distance to x0", f64::INFINITY, 2.0 * dx),
    }
    let rectified_drop = fb
        .s_values
        .iter()
        .flatten()
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0, f64::max);
    out.push("boundary", "rectified boundary decrease", rectified_drop, 0.0);
    out.push("boundary", "raw boundary decrease", fb.max_raw_decrease(), 2.0 * dx);
    let below_x0 = fb.s_values.iter().flatten().map(|s| fb.x0 - s).fold(f64::NEG_INFINITY, f64::max);
    out.push("boundary", "boundary below x0", below_x0, dx);
    out.push(
        "boundary",
        "rows with split stopping set",
        if vi.mask_single_crossing() { 0.0 } else { 1.0 },
        0.0,
    );

    // widening the window by one unit leaves the inner window unchanged
    let wide = GridSpec::new(g.x_min - 1.0, g.x_max + 1.0, g.n_x + (2.0 / dx).round() as usize, g.n_theta, g.theta_max)?
        .snapped_to_strike(p.strike)?;
    let wide_sol = solve_vi_projected(&wide, p)?;
    let shift = ((g.x_min - wide.x_min) / dx).round() as usize;
    let inner = (g.n_x / 10, g.n_x - 1 - g.n_x / 10);
    let mut trunc: f64 = 0.0;
    for j in 0..=g.n_theta {
        for i in inner.0..=inner.1 {
            trunc = trunc.max((u.get(i, j) - wide_sol.surface.get(i + shift, j)).abs());
        }
    }
    out.push("truncation", "inner-window change when widened", trunc, 1e-4);

    // independent solvers
    let schedule = if cfg.schedule.is_empty() {
        default_schedule(g, p)
    } else {
        cfg.schedule.clone()
    };
    let pen = solve_vi_penalty(g, p, &schedule)?;
    out.push(
        "method-agreement",
        "penalty vs relaxation (relative sup-norm)",
        pen.surface.sup_diff(u) / u.sup_norm(),
        1e-3,
    );
    let fd = explicit_fd_small(&cfg.explicit_grid, p)?;
    let eg = &cfg.explicit_grid;
    let fd_atm = fd.get(eg.kink_index(p.strike), eg.n_theta);
    out.push(
        "method-agreement",
        "explicit vs relaxation at the money",
        relative(fd_atm, u.get(atm, g.n_theta)),
        5e-3,
    );

    // linear limit and the γ ladder
    let lin = p.with_risk_aversion(cfg.linear_gamma)?;
    let lin_sol = solve_vi_projected(g, &lin)?;
    let tree = binomial_american(&TreeSpec::linear_limit(p, cfg.tree_steps), p.strike)?;
    out.push(
        "linear-limit",
        "small-gamma price vs binomial tree",
        relative(lin_sol.surface.get(atm, g.n_theta), tree),
        5e-3,
    );
    let ladder: Vec<Surface> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&gm| Ok(solve_vi_projected(g, &p.with_risk_aversion(gm)?)?.surface))
        .collect::<Result<_>>()?;
    let rise = ladder
        .windows(2)
        .flat_map(|w| w[0].values().iter().zip(w[1].values()).map(|(hi_gamma, lo_gamma)| hi_gamma - lo_gamma))
        .fold(f64::NEG_INFINITY, f64::max);
    out.push("linear-limit", "price increase as gamma grows", rise, 1e-10);

    for c in monotonicity_probe(p, &cfg.bumps, g)?.checks {
        out.push("comparative-statics", &c.name, c.worst_violation, c.slack);
    }

    // hedge
    let uncorrelated = ModelParams { correlation: 0.0, ..*p };
    let flat = PriceModel::build(&uncorrelated, g)?;
    let merton = p.sharpe / (p.traded_vol * p.risk_aversion);
    let policy = HedgePolicy::new(&flat);
    let mut merton_gap: f64 = 0.0;
    let policy_ref = HedgePolicy::new(&model);
    let mut hedge_excess = f64::NEG_INFINITY;
    let coef = p.correlation * p.vol / p.traded_vol;
    for j in (0..=g.n_theta).step_by(10) {
        let t = p.maturity - g.theta(j);
        for i in (1..g.n_x - 1).step_by(5) {
            let y = g.x(i).exp();
            merton_gap = merton_gap.max((policy.hedge(y, t)? - merton).abs());
            let h = policy_ref.hedge(y, t)?;
            let cap = coef * y * (p.positive_mmm_drift() * g.theta(j)).exp();
            hedge_excess = hedge_excess.max((h - merton).abs() - cap - coef * 10.0 * dx);
        }
    }
    out.push("hedge", "uncorrelated hedge minus Merton", merton_gap, 1e-12);
    out.push("hedge", "hedge beyond transported gradient bound", hedge_excess, 0.0);

    // dual bracket at the money
    let price0 = model.price(p.strike, 0.0)?;
    let plug = DualControl::plug_in(&model);
    let est = dual_value(p.strike, &plug, &StoppingRule::Boundary(fb.clone()), p, &cfg.mc)?;
    out.push(
        "dual",
        "plug-in control gap minus tolerance",
        (est.value - price0).abs() - (0.01 * price0 + 3.0 * est.std_error),
        0.0,
    );
    let now = dual_value(p.strike * 1.2, &plug, &StoppingRule::Immediate, p, &cfg.mc)?;
    out.push(
        "dual",
        "immediate exercise above price",
        now.value - model.price(p.strike * 1.2, 0.0)?,
        1e-10,
    );
    out.push("dual", "negative entropy", -est.entropy_term, 0.0);

    employee_checks(cfg, &mut out)?;

    Ok(SelftestReport { checks: out.checks })
}

fn employee_checks(cfg: &SelftestConfig, out: &mut Collector) -> Result<()> {
    let base = ModelParams { drift: 0.0, ..cfg.params };
    let g = &cfg.grid;
    let k = base.strike;
    let tv = cfg.vesting;

    let european = solve_eso(&EsoSpec::new(base, 0.0, tv)?, None, g)?;
    let mut worst: f64 = 0.0;
    for t in [0.0, european.vesting] {
        let exact = european_call(k, k, 0.0, base.vol, base.maturity - t);
        worst = worst.max(relative(european.cost(k, t)?, exact));
    }
    out.push("employee-option", "no-exercise cost vs lognormal call", worst, 5e-3);

    let mut flat_err: f64 = 0.0;
    for alpha in [0.0, 0.1] {
        let spec = EsoSpec::new(base, alpha, tv)?;
        let kappa = 0.25 * k;
        let post = Surface::from_initial_row(european.post_vesting.grid, &vec![kappa; g.n_x]);
        let pre = solve_pre_vesting(&spec, &post, g)?;
        for m in 0..=pre.grid.n_theta {
            let expected = kappa * (-alpha * pre.grid.theta(m)).exp();
            flat_err = pre.row(m).iter().map(|v| (v - expected).abs()).fold(flat_err, f64::max);
        }
    }
    out.push("employee-option", "flat data identity", flat_err, 1e-10);

    let priced = PriceModel::build(&base, g)?;
    let runs: Vec<_> = cfg
        .eso_alphas
        .iter()
        .map(|&a| solve_eso(&EsoSpec::new(base, a, tv)?, Some(&priced.boundary), g))
        .collect::<Result<_>>()?;
    let seam = runs
        .iter()
        .map(|s| {
            let last = s.post_vesting.row(s.post_vesting.grid.n_theta);
            last.iter().zip(s.pre_vesting.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    out.push("employee-option", "seam mismatch at vesting", seam, 1e-10);

    let negative = runs
        .iter()
        .flat_map(|s| s.post_vesting.values().iter().chain(s.pre_vesting.values()))
        .map(|v| -v)
        .fold(f64::NEG_INFINITY, f64::max);
    out.push("employee-option", "negative cost", negative, 0.0);

    // cost must not rise with α below the boundary; compare at t = 0
    let mut rise = f64::NEG_INFINITY;
    let t0 = runs.first().map(|s| s.pre_vesting.grid.n_theta).unwrap_or(0);
    let s_now = priced.boundary.at(base.maturity)?;
    for w in runs.windows(2) {
        for i in 0..g.n_x {
            if g.x(i) < s_now {
                rise = rise.max(w[1].pre_vesting.get(i, t0) - w[0].pre_vesting.get(i, t0));
            }
        }
    }
    out.push("employee-option", "cost increase with termination rate", rise, 1e-12);

    // α = 0 with vesting one step after the start: between intrinsic value
    // and the zero-drift American value
    let early = solve_eso(&EsoSpec::new(base, 0.0, g.dtheta())?, Some(&priced.boundary), g)?;
    let tree = TreeSpec { n_steps: cfg.tree_steps, drift: 0.0, vol: base.vol, strike: k, maturity: base.maturity };
    let mut outside = f64::NEG_INFINITY;
    for y in [0.8 * k, k, 1.2 * k] {
        let c = early.cost(y, 0.0)?;
        let american = binomial_american(&tree, y)?;
        outside = outside.max((y - k).max(0.0) - c).max(c - american * (1.0 + 5e-3));
    }
    out.push("employee-option", "early-vesting cost outside [intrinsic, American]", outside, 0.0);
    Ok(())
}
