use indiff_core::dual::{dual_value, DualControl, McSettings, StoppingRule};
use indiff_core::eso::{solve_eso, EsoSpec};
use indiff_core::oracle::{binomial_american, explicit_fd_small, TreeSpec};
use indiff_core::vi::x0_limit;
use indiff_core::{GridSpec, ModelParams, PriceModel};

// drift below rho c lambda: the short-maturity boundary sits at the strike
fn params() -> ModelParams {
    ModelParams::new(0.0, 0.3, 0.6, 0.5, 0.2, 1.5, 1.2, 1.0).unwrap()
}

#[test]
fn boundary_starts_at_strike_without_excess_drift() {
    let p = params();
    assert!(p.mmm_drift() < 0.0);
    assert_eq!(x0_limit(&p), p.strike.ln());
    let grid = GridSpec::centered(&p, 4.0, 401, 400).unwrap();
    let m = PriceModel::build(&p, &grid).unwrap();
    let s1 = m.boundary.s_values[0].unwrap();
    assert!((s1 - p.strike.ln()).abs() <= 2.0 * grid.dx(), "{s1}");
    let y_late = m.exercise_boundary(0.9).unwrap();
    let y_early = m.exercise_boundary(0.0).unwrap();
    assert!(y_early >= y_late);
}

#[test]
fn explicit_scheme_agrees_off_reference() {
    let p = params();
    let fine = GridSpec::centered(&p, 1.0, 51, 2000).unwrap();
    let explicit = explicit_fd_small(&fine, &p).unwrap();
    let grid = GridSpec::centered(&p, 4.0, 401, 400).unwrap();
    let m = PriceModel::build(&p, &grid).unwrap();
    let a = explicit.interpolate(p.strike.ln(), p.maturity).unwrap();
    let b = m.price(p.strike, 0.0).unwrap();
    assert!((a - b).abs() / b < 5e-3, "{a} vs {b}");
}

#[test]
fn price_sits_below_linear_limit() {
    let p = params();
    let grid = GridSpec::centered(&p, 4.0, 401, 400).unwrap();
    let m = PriceModel::build(&p, &grid).unwrap();
    let tree = binomial_american(&TreeSpec::linear_limit(&p, 2000), p.strike).unwrap();
    let price = m.price(p.strike, 0.0).unwrap();
    assert!(price < tree, "{price} vs {tree}");
    assert!(price > 0.0);
}

#[test]
fn dual_brackets_price_off_reference() {
    let p = params();
    let grid = GridSpec::centered(&p, 4.0, 201, 200).unwrap();
    let m = PriceModel::build(&p, &grid).unwrap();
    let price = m.price(p.strike, 0.0).unwrap();
    let mc = McSettings { n_paths: 40_000, n_steps: 200, seed: 7 };
    let est = dual_value(
        p.strike,
        &DualControl::plug_in(&m),
        &StoppingRule::Boundary(m.boundary.clone()),
        &p,
        &mc,
    )
    .unwrap();
    assert!((est.value - price).abs() <= 0.01 * price + 3.0 * est.std_error, "{est:?} vs {price}");
}

#[test]
fn employee_cost_between_intrinsic_and_no_exercise() {
    let p = params();
    let grid = GridSpec::centered(&p, 4.0, 201, 200).unwrap();
    let m = PriceModel::build(&p, &grid).unwrap();
    let spec = EsoSpec::new(p, 0.2, 0.25).unwrap();
    let sol = solve_eso(&spec, Some(&m.boundary), m.grid()).unwrap();
    let none = solve_eso(&EsoSpec::new(p, 0.0, 0.25).unwrap(), None, m.grid()).unwrap();
    for &y in &[0.8, 1.2, 1.6] {
        let c = sol.cost(y, 0.0).unwrap();
        assert!(c >= 0.0);
        assert!(c <= none.cost(y, 0.0).unwrap() + 1e-12, "y = {y}");
    }
}
