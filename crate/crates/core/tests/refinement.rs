use std::f64::consts::PI;

use nhcl::carleman::{build_weights, carleman_functional, CarlemanParams};
use nhcl::cost::sweep_horizon;
use nhcl::grid::{Grid1D, TimeGrid};
use nhcl::hum::{estimate_observability_constant, HumConfig};
use nhcl::kernels::{compute_k_constant, KernelFamily, KernelSpec, TimeProfile};
use nhcl::scenario::{sigma_minus_for, Scenario};
use nhcl::solver::solve_adjoint;

fn observability(n: usize, m: usize, horizon: f64, a: f64, b: f64) -> f64 {
    let scenario = Scenario::heat(n, m, horizon, a, b).unwrap();
    let est = estimate_observability_constant(&scenario, 200, 1e-8, 3).unwrap();
    assert!(est.converged, "power iteration did not settle: {:?}", est.history.last());
    est.value
}

#[test]
fn observability_constant_stable_under_refinement() {
    // the constant scales like e^{−2π²T}, so the Euler factor needs a fine dt
    let coarse = observability(63, 1024, 1.0, 0.1, 0.9);
    let fine = observability(127, 2048, 1.0, 0.1, 0.9);
    assert!(coarse.is_finite() && coarse > 0.0);
    assert!((fine - coarse).abs() / fine < 0.1, "coarse {coarse}, fine {fine}");
}

#[test]
fn observability_constant_grows_as_horizon_shrinks() {
    let values: Vec<f64> = [(1.0, 64), (0.25, 32), (0.1, 32)]
        .iter()
        .map(|&(t, m)| observability(31, m, t, 0.3, 0.8))
        .collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
}

fn carleman_ratio(n: usize, m: usize) -> f64 {
    let scenario = Scenario::heat(n, m, 0.5, 0.3, 0.8).unwrap();
    let phi_t = scenario.grid.sample(|x| (PI * x).sin());
    let adjoint = solve_adjoint(&scenario.grid, &scenario.time_grid, &scenario.dynamics(), &phi_t).unwrap();
    let params = CarlemanParams::for_window(1.0, 2.0, &scenario.grid, &scenario.window).unwrap();
    let weights = build_weights(&params, &scenario.grid, &scenario.time_grid).unwrap();
    carleman_functional(&adjoint, &weights, &params, &scenario.grid, &scenario.window)
        .unwrap()
        .ratio()
}

#[test]
fn carleman_ratio_finite_and_stable_under_refinement() {
    let coarse = carleman_ratio(63, 64);
    let fine = carleman_ratio(127, 128);
    assert!(coarse.is_finite() && coarse > 0.0);
    assert!((fine - coarse).abs() / fine < 0.1, "coarse {coarse}, fine {fine}");
}

#[test]
fn horizon_sweep_monotone_with_admissible_kernel() {
    let kernel = KernelSpec::new(
        KernelFamily::GaussianBump { rho: 0.2 },
        -20.0,
        TimeProfile::CarlemanDecay { c: 2.0 },
    )
    .unwrap();
    let mut template = Scenario::heat(31, 64, 1.0, 0.3, 0.8).unwrap().with_kernel(kernel);
    template.sigma_minus = sigma_minus_for(0.05);
    let k = compute_k_constant(
        &template.kernel,
        template.sigma_minus,
        &template.grid,
        &TimeGrid::new(1.0, 64).unwrap(),
    );
    assert!(k.is_finite());
    let y0 = Grid1D::new(31).unwrap().sample(|x| (PI * x).sin());
    let config = HumConfig::new(1e-8, 1e-12, 4000).unwrap();
    let sweep = sweep_horizon(&y0, &[1.0, 0.5, 0.25, 0.125], &template, &config).unwrap();
    assert!(sweep.costs.windows(2).all(|w| w[1] > w[0]), "{:?}", sweep.costs);
}
