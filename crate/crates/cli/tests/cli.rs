use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use indiff_cli::RunConfig;
use proptest::prelude::*;

const REFERENCE: &str = "model.b=0.05
model.c=0.3
model.rho=0.5
model.lambda=0.4
model.sigma=0.25
model.gamma=1
model.strike=1
model.maturity=1
";

fn indiff(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_indiff"));
    cmd.args(args).current_dir(dir).env_remove("INDIFF_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    std::fs::write(dir.join(name), format!("{REFERENCE}{extra}")).unwrap();
    name.to_string()
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect())
        .collect()
}

#[test]
fn price_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    assert_eq!(indiff(&["price", "--config", &cfg, "--out", "a"], dir.path(), &[]).0, 0);
    assert_eq!(indiff(&["price", "--config", &cfg, "--out", "b"], dir.path(), &[]).0, 0);
    for f in ["price.csv", "price.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn maturity_row_is_intrinsic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "query.stride=1\n");
    assert_eq!(indiff(&["price", "--config", &cfg, "--out", "o"], dir.path(), &[]).0, 0);
    let rows = read_csv(&dir.path().join("o/price.csv"));
    let last: Vec<_> = rows.iter().filter(|r| r[1] == 1.0).collect();
    assert_eq!(last.len(), 401);
    for r in last {
        assert!((r[2] - (r[0] - 1.0).max(0.0)).abs() <= 1e-12 * r[0].max(1.0), "{r:?}");
    }
}

#[test]
fn out_of_window_query_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "query.spots=1,100\n");
    let (code, text) = indiff(&["price", "--config", &cfg, "--out", "o"], dir.path(), &[]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("outside the solved window"), "{text}");
    assert!(!dir.path().join("o").exists());

    let cfg = write_config(dir.path(), "late.cfg", "query.times=0,1.5\n");
    assert_eq!(indiff(&["hedge", "--config", &cfg, "--out", "o"], dir.path(), &[]).0, 1);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), "typo.cfg", "model.gama=2\n");
    assert_eq!(indiff(&["price", "--config", &typo], dir.path(), &[]).0, 1);
    let eso = write_config(dir.path(), "eso.cfg", "");
    assert_eq!(indiff(&["eso", "--config", &eso], dir.path(), &[]).0, 1);
    assert_eq!(indiff(&["price", "--config", "missing.cfg"], dir.path(), &[]).0, 2);
    let stall = write_config(dir.path(), "stall.cfg", "solver.max_sweeps=1\n");
    assert_eq!(indiff(&["price", "--config", &stall], dir.path(), &[]).0, 2);
    let threads = write_config(dir.path(), "t.cfg", "");
    assert_eq!(indiff(&["price", "--config", &threads], dir.path(), &[("INDIFF_THREADS", "zero")]).0, 1);
    // a coarse grid misses the pinned oracle tolerances
    let coarse = write_config(dir.path(), "coarse.cfg", "grid.n_x=41\ngrid.n_theta=40\nmc.n_paths=2000\n");
    let (code, text) = indiff(&["selftest", "--config", &coarse, "--out", "st"], dir.path(), &[]);
    assert_eq!(code, 3, "{text}");
    assert!(text.contains("FAIL ["));
    assert!(dir.path().join("st/selftest.json").exists());
}

#[test]
fn boundary_is_non_increasing_in_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    assert_eq!(indiff(&["boundary", "--config", &cfg, "--out", "o"], dir.path(), &[]).0, 0);
    let rows = read_csv(&dir.path().join("o/boundary.csv"));
    assert_eq!(rows.len(), 400);
    for w in rows.windows(2) {
        assert!(w[1][0] > w[0][0]);
        assert!(w[1][1] <= w[0][1], "{w:?}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/boundary.json")).unwrap()).unwrap();
    assert_eq!(meta["solve"]["censored_boundary_times"], serde_json::json!([]));
}

#[test]
fn sweep_prices_fall_with_gamma_for_any_pool_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "sweep.values=0.5,1,2\nsweep.workers=3\n");
    assert_eq!(indiff(&["sweep", "--config", &cfg, "--out", "a"], dir.path(), &[]).0, 0);
    assert_eq!(indiff(&["sweep", "--config", &cfg, "--out", "b"], dir.path(), &[("INDIFF_THREADS", "1")]).0, 0);
    let a = std::fs::read(dir.path().join("a/sweep.csv")).unwrap();
    assert!(a == std::fs::read(dir.path().join("b/sweep.csv")).unwrap());

    let text = String::from_utf8(a).unwrap();
    let mut by_gamma: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "gamma");
        by_gamma.entry(f[1].to_string()).or_default().push(f[4].parse().unwrap());
    }
    let cols: Vec<&Vec<f64>> = ["0.5", "1.0", "2.0"].iter().map(|g| &by_gamma[*g]).collect();
    assert!(cols[0].len() > 100 && cols.iter().all(|c| c.len() == cols[0].len()));
    for k in 0..cols[0].len() {
        assert!(cols[1][k] <= cols[0][k] && cols[2][k] <= cols[1][k], "row {k}");
    }
}

#[test]
fn eso_and_dual_check_emit_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let eso = REFERENCE.replace("model.b=0.05", "model.b=0") + "eso.alpha=0.1\ngrid.n_x=201\ngrid.n_theta=200\n";
    std::fs::write(dir.path().join("eso.cfg"), eso).unwrap();
    assert_eq!(indiff(&["eso", "--config", "eso.cfg", "--out", "o"], dir.path(), &[]).0, 0);
    let rows = read_csv(&dir.path().join("o/eso.csv"));
    assert!(rows.iter().all(|r| r.len() == 3 && r[2] >= 0.0));

    let dual = write_config(dir.path(), "dual.cfg", "grid.n_x=201\ngrid.n_theta=200\nmc.n_paths=20000\n");
    assert_eq!(indiff(&["dual-check", "--config", &dual, "--out", "o"], dir.path(), &[]).0, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/dual_check.json")).unwrap()).unwrap();
    assert_eq!(report["all_passed"], serde_json::json!(true), "{report}");
}

#[test]
fn json_config_matches_flat() {
    let dir = tempfile::tempdir().unwrap();
    let flat = RunConfig::parse(REFERENCE).unwrap();
    std::fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(&flat).unwrap()).unwrap();
    write_config(dir.path(), "run.cfg", "");
    assert_eq!(indiff(&["boundary", "--config", "run.json", "--out", "j"], dir.path(), &[]).0, 0);
    assert_eq!(indiff(&["boundary", "--config", "run.cfg", "--out", "f"], dir.path(), &[]).0, 0);
    let a = std::fs::read(dir.path().join("j/boundary.csv")).unwrap();
    assert!(a == std::fs::read(dir.path().join("f/boundary.csv")).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_config_round_trips(
        gamma in 1e-3f64..10.0,
        b in -0.2f64..0.2,
        rho in 0.0f64..0.99,
        n_x in 5usize..2000,
        values in proptest::collection::vec(0.01f64..5.0, 0..4),
        times in proptest::collection::vec(0.0f64..1.0, 0..3),
        seed in any::<u64>(),
        vesting in proptest::option::of(0.01f64..0.99),
    ) {
        let mut cfg = RunConfig::parse(REFERENCE).unwrap();
        cfg.model.risk_aversion = gamma;
        cfg.model.drift = b;
        cfg.model.correlation = rho;
        cfg.grid.n_x = n_x;
        cfg.sweep.values = values;
        cfg.query.times = times;
        cfg.mc.seed = seed;
        cfg.eso.vesting = vesting;
        let text = cfg.to_flat();
        prop_assert_eq!(RunConfig::parse(&text).unwrap(), cfg.clone());
        let json = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(RunConfig::parse(&json).unwrap(), cfg);
    }
}
