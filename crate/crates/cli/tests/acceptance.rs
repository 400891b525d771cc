//! Desk-scale acceptance run on the reference configuration. Prints one
//! line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};

use indiff_core::selftest::{Check, SelftestReport};
use indiff_core::vi::{default_schedule, solve_vi_penalty};
use indiff_core::{GridSpec, ModelParams, PriceModel};

const REFERENCE: &str = "model.b=0.05
model.c=0.3
model.rho=0.5
model.lambda=0.4
model.sigma=0.25
model.gamma=1
model.strike=1
model.maturity=1
grid.half_width=4
grid.n_x=401
grid.n_theta=400
mc.n_paths=100000
mc.n_steps=400
";

// reference grid spacing
const DX: f64 = 8.0 / 400.0;
const DT: f64 = 1.0 / 400.0;

struct Pin {
    group: &'static str,
    name: &'static str,
    threshold: f64,
}

const fn pin(group: &'static str, name: &'static str, threshold: f64) -> Pin {
    Pin { group, name, threshold }
}

fn criteria() -> Vec<(&'static str, Vec<Pin>)> {
    let slack = 10.0 * (DX + DT);
    vec![
        (
            "obstacle and terminal row",
            vec![
                pin("obstacle", "initial row equals payoff", 0.0),
                pin("obstacle", "payoff minus value", 1e-12),
            ],
        ),
        (
            "a-priori bounds",
            vec![
                pin("bounds", "value below upper barrier", slack),
                pin("bounds", "value above payoff", slack),
                pin("bounds", "log-gradient non-negative", 10.0 * DX),
                pin("bounds", "log-gradient below growth bound", 10.0 * DX),
            ],
        ),
        ("time monotonicity", vec![pin("time-monotonicity", "decrease in theta", 1e-10)]),
        (
            "boundary limit and monotonicity",
            vec![
                pin("boundary", "first sample distance to x0", 2.0 * DX),
                pin("boundary", "rectified boundary decrease", 0.0),
                pin("boundary", "raw boundary decrease", 2.0 * DX),
            ],
        ),
        (
            "method agreement",
            vec![
                pin("method-agreement", "penalty vs relaxation (relative sup-norm)", 1e-3),
                pin("method-agreement", "explicit vs relaxation at the money", 5e-3),
            ],
        ),
        ("linear-limit oracle", vec![pin("linear-limit", "small-gamma price vs binomial tree", 5e-3)]),
        (
            "comparative statics",
            vec![
                pin("comparative-statics", "non-increasing in gamma", slack),
                pin("comparative-statics", "non-increasing in lambda", slack),
                pin("comparative-statics", "non-decreasing in b", slack),
                pin("comparative-statics", "sublinear in the payoff", slack),
            ],
        ),
        (
            "hedge sanity",
            vec![
                pin("hedge", "uncorrelated hedge minus Merton", 1e-12),
                pin("hedge", "hedge beyond transported gradient bound", 0.0),
            ],
        ),
        (
            "dual bracket",
            vec![
                pin("dual", "plug-in control gap minus tolerance", 0.0),
                pin("dual", "immediate exercise above price", 1e-10),
            ],
        ),
        (
            "employee option",
            vec![
                pin("employee-option", "no-exercise cost vs lognormal call", 5e-3),
                pin("employee-option", "flat data identity", 1e-10),
                pin("employee-option", "seam mismatch at vesting", 1e-10),
                pin("employee-option", "cost increase with termination rate", 1e-12),
            ],
        ),
    ]
}

fn find<'a>(report: &'a SelftestReport, group: &str, name: &str) -> Option<&'a Check> {
    report.checks.iter().find(|c| c.group == group && c.name == name)
}

/// Every pinned check present with the pinned threshold and passing, and
/// every other check of the same groups passing.
fn judge(report: &SelftestReport, pins: &[Pin]) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    for p in pins {
        match find(report, p.group, p.name) {
            None => {
                ok = false;
                notes.push(format!("missing `{}`", p.name));
            }
            Some(c) => {
                let pinned = (c.threshold - p.threshold).abs() <= 1e-12 * p.threshold.abs().max(1.0);
                let pass = pinned && c.measured <= p.threshold;
                ok &= pass;
                notes.push(format!("{} {:.3e} <= {:.3e}{}", p.name, c.measured, p.threshold, if pinned { "" } else { " (threshold drift)" }));
            }
        }
    }
    let mut groups: Vec<&str> = pins.iter().map(|p| p.group).collect();
    groups.dedup();
    for g in groups {
        for c in report.group(g) {
            if !c.passed {
                ok = false;
                notes.push(format!("{} failed", c.name));
            }
        }
    }
    (ok, notes.join("; "))
}

fn run_selftest(dir: &Path, out: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_indiff"))
        .args(["selftest", "--config", "reference.cfg", "--out", out])
        .current_dir(dir)
        .env_remove("INDIFF_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    let bytes = std::fs::read(dir.join(out).join("selftest.json")).map_err(|e| e.to_string())?;
    if !status.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&status.stdout));
    }
    Ok(bytes)
}

fn reference_params() -> ModelParams {
    ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 1.0, 1.0, 1.0).unwrap()
}

/// Informational: refinement ratio of the at-the-money price and the raw
/// penalty surface against criteria 1-3.
fn informational() {
    let p = reference_params();
    let atm = |nx, nt| {
        let g = GridSpec::centered(&p, 4.0, nx, nt).unwrap();
        PriceModel::build(&p, &g).unwrap().price(1.0, 0.0).unwrap()
    };
    let (a, b, c) = (atm(101, 25), atm(201, 100), atm(401, 400));
    println!("info: at-the-money price {c:.6}, refinement ratio {:.3}", (a - b) / (b - c));

    let g = GridSpec::centered(&p, 4.0, 401, 400).unwrap();
    let sol = solve_vi_penalty(&g, &p, &default_schedule(&g, &p)).unwrap();
    let mut theta_drop: f64 = 0.0;
    for j in 1..=g.n_theta {
        for i in 0..g.n_x {
            theta_drop = theta_drop.max(sol.surface.get(i, j - 1) - sol.surface.get(i, j));
        }
    }
    let terminal = sol.surface.row(0).iter().zip(&sol.obstacle).map(|(u, o)| (u - o).abs()).fold(0.0, f64::max);
    println!(
        "info: penalty continuation surface: terminal gap {terminal:.1e}, obstacle margin {:.1e}, bound violation {:?}, largest theta decrease {theta_drop:.1e}",
        sol.obstacle_margin(),
        sol.diagnostics.bounds.violation(),
    );
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    std::fs::write(dir.path().join("reference.cfg"), REFERENCE).unwrap();
    let first = run_selftest(dir.path(), "first");
    let second = run_selftest(dir.path(), "second");
    let (first, second) = match (first, second) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            println!("FAIL selftest did not produce a report: {:?} {:?}", a.err(), b.err());
            return ExitCode::FAILURE;
        }
    };
    let report: SelftestReport = serde_json::from_slice(&first).expect("selftest report parses");

    let mut all = true;
    for (k, (title, pins)) in criteria().iter().enumerate() {
        let (ok, notes) = judge(&report, pins);
        all &= ok;
        println!("criterion {:>2} {} {title}: {notes}", k + 1, if ok { "PASS" } else { "FAIL" });
    }
    let same = first == second;
    all &= same;
    println!(
        "criterion 11 {} reproducibility: two selftest reports {}",
        if same { "PASS" } else { "FAIL" },
        if same { "byte-identical" } else { "differ" }
    );
    informational();
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
