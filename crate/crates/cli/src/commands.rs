use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use indiff_core::dual::{dual_value, DualControl, DualEstimate, McSettings, StoppingRule};
use indiff_core::eso::{solve_eso, EsoSpec};
use indiff_core::pricing::HedgePolicy;
use indiff_core::selftest::{run_selftest, SelftestConfig, SelftestReport};
use indiff_core::vi::ScheduleEntry;
use indiff_core::{payoff, Error as CoreError, GridSpec, ModelParams, PriceModel};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Price,
    Boundary,
    Hedge,
    Eso,
    DualCheck,
    Sweep,
    Selftest,
}

/// Where and how a command runs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output.dir`.
    pub out: Option<PathBuf>,
    /// Overrides `sweep.workers` (from `INDIFF_THREADS`).
    pub threads: Option<usize>,
}

/// Runs `cmd` and writes its artifacts; progress lines go to `log`.
pub fn run(cmd: Command, cfg: &RunConfig, opts: &RunOptions, log: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let files = match cmd {
        Command::Price => cmd_price(cfg)?,
        Command::Boundary => cmd_boundary(cfg)?,
        Command::Hedge => cmd_hedge(cfg)?,
        Command::Eso => cmd_eso(cfg)?,
        Command::DualCheck => cmd_dualcheck(cfg)?,
        Command::Sweep => cmd_sweep(cfg, opts.threads)?,
        Command::Selftest => {
            let report = selftest_report(cfg)?;
            for c in &report.checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                let _ = writeln!(log, "{verdict} [{}] {}: {:e} <= {:e}", c.group, c.name, c.measured, c.threshold);
            }
            let written = write_all(&dir, vec![("selftest.json".into(), to_json(&report))])?;
            let failed = report.failures().len();
            if failed > 0 {
                return Err(CliError::Selftest { failed, total: report.checks.len() });
            }
            return Ok(written);
        }
    };
    let written = write_all(&dir, files)?;
    for f in &written {
        let _ = writeln!(log, "wrote {}", f.display());
    }
    Ok(written)
}

type Artifact = (String, String);

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("metadata serialises");
    s.push('\n');
    s
}

/// Writes every artifact through a temporary file and a rename, so a failed
/// run never leaves a partial file behind.
fn write_all(dir: &Path, files: Vec<Artifact>) -> CliResult<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut out = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(&name);
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, body).map_err(io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io(&path))?;
        out.push(path);
    }
    Ok(out)
}

fn build_model(cfg: &RunConfig, p: &ModelParams) -> CliResult<PriceModel> {
    let grid = GridSpec::centered(p, cfg.grid.half_width, cfg.grid.n_x, cfg.grid.n_theta)?;
    let choice = cfg.solver_choice(p, &grid);
    Ok(PriceModel::build_with(p, &grid, &choice)?)
}

/// Query spots and times, checked against the solved window before any solve.
fn query_points(cfg: &RunConfig) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let grid = cfg.grid_spec()?;
    let t_max = cfg.model.maturity;
    let spots = if cfg.query.spots.is_empty() {
        (0..grid.n_x).step_by(cfg.query.stride).map(|i| grid.x(i).exp()).collect()
    } else {
        cfg.query.spots.clone()
    };
    let times = if cfg.query.times.is_empty() {
        let n = cfg.query.n_times - 1;
        (0..=n).map(|k| t_max * k as f64 / n as f64).collect()
    } else {
        cfg.query.times.clone()
    };
    for &y in &spots {
        if !grid.contains_x(y.ln()) {
            return Err(out_of_window(&grid, y.ln(), 0.0));
        }
    }
    for &t in &times {
        if !(0.0..=t_max).contains(&t) {
            return Err(out_of_window(&grid, spots.first().map_or(f64::NAN, |y| y.ln()), t_max - t));
        }
    }
    Ok((spots, times))
}

fn out_of_window(grid: &GridSpec, x: f64, theta: f64) -> CliError {
    CliError::Core(CoreError::OutOfDomain {
        x,
        theta,
        x_min: grid.x_min,
        x_max: grid.x_max,
        theta_max: grid.theta_max,
    })
}

/// `header` then one `y,t,value` row per time (outer) and spot (inner).
fn table(
    header: &str,
    spots: &[f64],
    times: &[f64],
    f: impl FnMut(f64, f64) -> indiff_core::Result<f64>,
) -> CliResult<String> {
    let mut s = format!("{header}\n");
    rows(&mut s, "", spots, times, f)?;
    Ok(s)
}

fn rows(
    s: &mut String,
    prefix: &str,
    spots: &[f64],
    times: &[f64],
    mut f: impl FnMut(f64, f64) -> indiff_core::Result<f64>,
) -> CliResult<()> {
    for &t in times {
        for &y in spots {
            let v = f(y, t)?;
            let _ = writeln!(s, "{prefix}{},{},{}", fmt_f64(y), fmt_f64(t), fmt_f64(v));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveMeta<'a> {
    params: &'a ModelParams,
    grid: &'a GridSpec,
    method: Method,
    schedule: &'a [ScheduleEntry],
    schedule_differences: &'a [f64],
    iterations: usize,
    complementarity: f64,
    complementarity_tol: f64,
    contact_tol: f64,
    monotonicity_margin: f64,
    bounds: &'a indiff_core::penalty::BoundReport,
    bound_violation: Option<(&'static str, f64)>,
    /// Times `t` at which the exercise boundary lies beyond the grid.
    censored_boundary_times: Vec<f64>,
}

fn solve_meta<'a>(cfg: &RunConfig, m: &'a PriceModel) -> SolveMeta<'a> {
    let d = &m.vi.diagnostics;
    SolveMeta {
        params: &m.params,
        grid: m.grid(),
        method: cfg.solver.method,
        schedule: &d.schedule,
        schedule_differences: &d.schedule_differences,
        iterations: d.iterations,
        complementarity: d.complementarity,
        complementarity_tol: d.complementarity_tol,
        contact_tol: d.contact_tol,
        monotonicity_margin: d.monotonicity_margin,
        bounds: &d.bounds,
        bound_violation: d.bounds.violation(),
        censored_boundary_times: m.boundary.censored().iter().map(|th| m.params.maturity - th).collect(),
    }
}

#[derive(Serialize)]
struct QueryMeta<'a> {
    solve: SolveMeta<'a>,
    n_spots: usize,
    n_times: usize,
}

pub fn cmd_price(cfg: &RunConfig) -> CliResult<Vec<Artifact>> {
    let (spots, times) = query_points(cfg)?;
    let m = build_model(cfg, &cfg.model)?;
    let csv = table("y,t,P", &spots, &times, |y, t| m.price(y, t))?;
    let meta = QueryMeta { solve: solve_meta(cfg, &m), n_spots: spots.len(), n_times: times.len() };
    Ok(vec![("price.csv".into(), csv), ("price.json".into(), to_json(&meta))])
}

pub fn cmd_hedge(cfg: &RunConfig) -> CliResult<Vec<Artifact>> {
    let (spots, times) = query_points(cfg)?;
    let m = build_model(cfg, &cfg.model)?;
    let policy = HedgePolicy::new(&m);
    let csv = table("y,t,pi", &spots, &times, |y, t| policy.hedge(y, t))?;
    let meta = QueryMeta { solve: solve_meta(cfg, &m), n_spots: spots.len(), n_times: times.len() };
    Ok(vec![("hedge.csv".into(), csv), ("hedge.json".into(), to_json(&meta))])
}

pub fn cmd_boundary(cfg: &RunConfig) -> CliResult<Vec<Artifact>> {
    let m = build_model(cfg, &cfg.model)?;
    let fb = &m.boundary;
    let t_max = m.params.maturity;
    // samples run forward in theta, so reversing gives increasing t
    let mut csv = String::from("t,y_star\n");
    for (theta, s) in fb.theta_samples.iter().zip(&fb.s_values).rev() {
        if let Some(s) = s {
            let _ = writeln!(csv, "{},{}", fmt_f64(t_max - theta), fmt_f64(s.exp()));
        }
    }
    #[derive(Serialize)]
    struct Meta<'a> {
        solve: SolveMeta<'a>,
        /// Short-maturity limit of the boundary, `y*(T-)`.
        limit_at_maturity: f64,
        max_raw_decrease: f64,
    }
    let meta = Meta {
        solve: solve_meta(cfg, &m),
        limit_at_maturity: fb.x0.exp(),
        max_raw_decrease: fb.max_raw_decrease(),
    };
    Ok(vec![("boundary.csv".into(), csv), ("boundary.json".into(), to_json(&meta))])
}

pub fn cmd_eso(cfg: &RunConfig) -> CliResult<Vec<Artifact>> {
    let spec = EsoSpec::new(cfg.model, cfg.eso.alpha, cfg.vesting())?;
    let (spots, times) = query_points(cfg)?;
    let m = build_model(cfg, &cfg.model)?;
    let sol = solve_eso(&spec, Some(&m.boundary), m.grid())?;
    let csv = table("y,t,C", &spots, &times, |y, t| sol.cost(y, t))?;
    #[derive(Serialize)]
    struct Meta<'a> {
        solve: SolveMeta<'a>,
        alpha: f64,
        vesting: f64,
        n_spots: usize,
        n_times: usize,
    }
    let meta = Meta {
        solve: solve_meta(cfg, &m),
        alpha: spec.alpha,
        vesting: sol.vesting,
        n_spots: spots.len(),
        n_times: times.len(),
    };
    Ok(vec![("eso.csv".into(), csv), ("eso.json".into(), to_json(&meta))])
}

#[derive(Serialize)]
struct Bracket {
    estimate: DualEstimate,
    /// `0.01 P + 3 std_error`.
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct DualReport {
    spot: f64,
    price: f64,
    control: String,
    mc: McSettings,
    /// Plug-in control with the solver's boundary: should match the price.
    plug_in: Bracket,
    /// Plug-in control held to maturity: a lower bound on the price.
    at_maturity: Bracket,
    /// Immediate exercise: the payoff, a lower bound on the price.
    intrinsic: f64,
    intrinsic_passed: bool,
    /// Constant controls under the solver's boundary, for comparison only:
    /// with a fixed stopping rule they bound nothing.
    constant_controls: Vec<(f64, DualEstimate)>,
    all_passed: bool,
}

pub fn cmd_dualcheck(cfg: &RunConfig) -> CliResult<Vec<Artifact>> {
    let p = &cfg.model;
    let y0 = cfg.query.spot.unwrap_or(p.strike);
    let grid = cfg.grid_spec()?;
    if !grid.contains_x(y0.ln()) {
        return Err(out_of_window(&grid, y0.ln(), p.maturity));
    }
    let m = build_model(cfg, p)?;
    let mc = cfg.mc_settings();
    let price = m.price(y0, 0.0)?;
    let control = DualControl::plug_in(&m);
    let plug = dual_value(y0, &control, &StoppingRule::Boundary(m.boundary.clone()), p, &mc)?;
    let hold = dual_value(y0, &control, &StoppingRule::AtMaturity, p, &mc)?;
    let tol = |e: &DualEstimate| 0.01 * price + 3.0 * e.std_error;
    let plug_in = Bracket { passed: (plug.value - price).abs() <= tol(&plug), tolerance: tol(&plug), estimate: plug };
    let at_maturity = Bracket { passed: hold.value <= price + tol(&hold), tolerance: tol(&hold), estimate: hold };
    let rule = StoppingRule::Boundary(m.boundary.clone());
    let constant_controls = [-2.0, -1.0, 0.0, 1.0, 2.0]
        .into_iter()
        .map(|phi| Ok((phi, dual_value(y0, &DualControl::Constant(phi), &rule, p, &mc)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let intrinsic = payoff(y0.ln(), p.strike);
    let intrinsic_passed = intrinsic <= price + 1e-10;
    let report = DualReport {
        spot: y0,
        price,
        control: control.describe(),
        mc,
        all_passed: plug_in.passed && at_maturity.passed && intrinsic_passed,
        plug_in,
        at_maturity,
        intrinsic,
        intrinsic_passed,
        constant_controls,
    };
    Ok(vec![("dual_check.json".into(), to_json(&report))])
}

pub fn cmd_sweep(cfg: &RunConfig, threads: Option<usize>) -> CliResult<Vec<Artifact>> {
    let (spots, times) = query_points(cfg)?;
    let param = cfg.sweep.parameter;
    let workers = threads.unwrap_or(cfg.sweep.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    // each worker owns one solve; collect keeps the sweep order
    let tables: Vec<CliResult<(String, serde_json::Value)>> = pool.install(|| {
        cfg.sweep
            .values
            .par_iter()
            .map(|&v| {
                let p = param.apply(&cfg.model, v)?;
                let m = build_model(cfg, &p)?;
                let prefix = format!("{},{},", param.name(), fmt_f64(v));
                let mut body = String::new();
                rows(&mut body, &prefix, &spots, &times, |y, t| m.price(y, t))?;
                let meta = serde_json::to_value(solve_meta(cfg, &m)).expect("metadata serialises");
                Ok((body, meta))
            })
            .collect()
    });
    let mut csv = String::from("parameter,value,y,t,P\n");
    let mut metas = Vec::with_capacity(tables.len());
    for t in tables {
        let (body, meta) = t?;
        csv.push_str(&body);
        metas.push(meta);
    }
    Ok(vec![("sweep.csv".into(), csv), ("sweep.json".into(), to_json(&metas))])
}

/// Suite for the configured model and grid.
pub fn selftest_config(cfg: &RunConfig) -> CliResult<SelftestConfig> {
    let mut st = SelftestConfig::for_params(cfg.model, cfg.grid.half_width, cfg.grid.n_x, cfg.grid.n_theta)?;
    if !cfg.solver.epsilon.is_empty() {
        let n_trunc = cfg.solver.n_trunc.unwrap_or(cfg.grid.half_width);
        st.schedule = cfg.solver.epsilon.iter().map(|&epsilon| ScheduleEntry { epsilon, n_trunc }).collect();
    }
    st.mc = cfg.mc_settings();
    st.vesting = cfg.vesting();
    Ok(st)
}

pub fn selftest_report(cfg: &RunConfig) -> CliResult<SelftestReport> {
    Ok(run_selftest(&selftest_config(cfg)?)?)
}
