//! A bounded kernel without unique continuation.
//!
//! `u` is a smooth two-lobe bump vanishing on `[a, b]`, `c_k = ⟨u, φ_k⟩`
//! with `φ_k = √2 sin(kπx)`, and `p = −u'' − λ²u = Σ(k²π² − λ²)c_k φ_k`.
//! After rescaling `u` so that `∫pu = 1`, the kernel `K(x,θ) = −p(x)p(θ)`
//! gives `−u'' + ∫K u dθ = −u'' − p = λ²u`. With the opposite sign `−Δ + K`
//! would be bounded below by `π² > λ²`, so the minus sign is required.
//! The adjoint solution `e^{λ²t}u` then vanishes on `(a,b) × (0,T)`.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{apply_laplacian, ControlWindow, Field, Grid1D, TimeGrid};
use crate::hum::{estimate_observability_constant, ControlOperator, HumConfig};
use crate::kernels::{
    compute_k_constant, KernelFamily, KernelSpec, SpatialProfile, TabulatedKernel, TimeProfile,
};
use crate::scenario::{sigma_minus_for, Scenario};
use crate::solver::SourceTerm;

/// Which eigenbasis defines `c_k` and `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumModel {
    /// Truncated series with `k²π²`, `k ≤ n_modes`.
    #[default]
    Continuum,
    /// All `n` discrete sine modes with eigenvalues `4/h²·sin²(kπh/2)`,
    /// i.e. `p = −Δ_h u − λ²u` exactly on the grid.
    GridConsistent,
}

#[derive(Debug, Clone)]
pub struct CounterexampleArtifacts {
    pub a: f64,
    pub b: f64,
    pub lambda_spec: f64,
    pub n_modes: usize,
    pub model: SpectrumModel,
    /// Coefficients of the rescaled `u`.
    pub c: Vec<f64>,
    pub u: Field,
    /// Closed-form `u''` of the rescaled `u`.
    pub u_xx: Field,
    pub p: Field,
    pub kernel: KernelSpec,
    /// `h·Σ p·u`.
    pub normalization_value: f64,
    /// `Σ(κ_k − λ²)c_k²` after rescaling.
    pub series_normalization: f64,
    pub rescale: f64,
}

fn lobe(x: f64, l: f64, r: f64) -> (f64, f64) {
    if x <= l || x >= r {
        return (0.0, 0.0);
    }
    let c = (r - l).powi(2) / 4.0;
    let q = (x - l) * (r - x);
    let dq = l + r - 2.0 * x;
    let v = (-c / q).exp();
    let d2 = v * (c * c * dq * dq / q.powi(4) + c * (-2.0 / (q * q) - 2.0 * dq * dq / q.powi(3)));
    (v, d2)
}

/// Values and exact second derivative of the two-lobe profile.
fn bump_with_second_derivative(a: f64, b: f64, grid: &Grid1D) -> Result<(Field, Field)> {
    ControlWindow::new(a, b)?;
    let h = grid.h();
    if a <= 2.0 * h || 1.0 - b <= 2.0 * h {
        return Err(invalid(
            "window",
            format!("need a > 2h and 1 − b > 2h for the bump supports, got ({a}, {b}) at h = {h}"),
        ));
    }
    let eval = |x: f64| {
        let (vl, dl) = lobe(x, h, a - h);
        let (vr, dr) = lobe(x, b + h, 1.0 - h);
        (vl - vr, dl - dr)
    };
    let pairs: Vec<(f64, f64)> = grid.nodes().iter().map(|&x| eval(x)).collect();
    Ok((
        Field::from_iterator(pairs.len(), pairs.iter().map(|p| p.0)),
        Field::from_iterator(pairs.len(), pairs.iter().map(|p| p.1)),
    ))
}

/// Positive mollifier lobe on `(h, a − h)` minus one on `(b + h, 1 − h)`,
/// each peaking at `e^{−1}`. The `h` margins keep `Δ_h u` zero on `[a, b]`.
pub fn build_bump_function(a: f64, b: f64, grid: &Grid1D) -> Result<Field> {
    Ok(bump_with_second_derivative(a, b, grid)?.0)
}

fn mode(grid: &Grid1D, k: usize) -> Field {
    grid.sample(|x| SQRT_2 * (k as f64 * PI * x).sin())
}

/// Discrete Dirichlet eigenvalue of mode `k`.
pub fn discrete_eigenvalue(grid: &Grid1D, k: usize) -> f64 {
    let h = grid.h();
    4.0 / (h * h) * (k as f64 * PI * h / 2.0).sin().powi(2)
}

/// [`build_counterexample_with`] using [`SpectrumModel::Continuum`].
pub fn build_counterexample(
    a: f64,
    b: f64,
    lambda_spec: f64,
    n_modes: usize,
    grid: &Grid1D,
) -> Result<CounterexampleArtifacts> {
    build_counterexample_with(a, b, lambda_spec, n_modes, grid, SpectrumModel::Continuum)
}

pub fn build_counterexample_with(
    a: f64,
    b: f64,
    lambda_spec: f64,
    n_modes: usize,
    grid: &Grid1D,
    model: SpectrumModel,
) -> Result<CounterexampleArtifacts> {
    if !(lambda_spec > 0.0 && lambda_spec < PI) {
        return Err(invalid(
            "lambda_spec",
            format!("must lie in (0, π), got {lambda_spec}"),
        ));
    }
    if n_modes < 16 {
        return Err(invalid(
            "n_modes",
            format!("need at least 16, got {n_modes}"),
        ));
    }
    let n = grid.n_interior();
    let (u0, u0_xx) = bump_with_second_derivative(a, b, grid)?;
    let lam2 = lambda_spec * lambda_spec;
    let (modes, eig): (usize, Box<dyn Fn(usize) -> f64>) = match model {
        SpectrumModel::Continuum => (n_modes, Box::new(|k| (k as f64 * PI).powi(2))),
        SpectrumModel::GridConsistent => {
            if discrete_eigenvalue(grid, 1) <= lam2 {
                return Err(invalid(
                    "lambda_spec",
                    "λ² must stay below the first discrete eigenvalue",
                ));
            }
            (n, Box::new(|k| discrete_eigenvalue(grid, k)))
        }
    };
    let h = grid.h();
    let basis: Vec<Field> = (1..=modes).map(|k| mode(grid, k)).collect();
    let c0: Vec<f64> = basis.iter().map(|phi| h * phi.dot(&u0)).collect();
    let norm0: f64 = c0
        .iter()
        .enumerate()
        .map(|(i, c)| (eig(i + 1) - lam2) * c * c)
        .sum();
    if !(norm0 > 0.0) {
        return Err(invalid(
            "lambda_spec",
            "normalization series is not positive",
        ));
    }
    let rescale = norm0.sqrt().recip();
    let u = &u0 * rescale;
    let u_xx = &u0_xx * rescale;
    let c: Vec<f64> = c0.iter().map(|v| v * rescale).collect();
    let p = match model {
        SpectrumModel::Continuum => basis
            .iter()
            .zip(&c)
            .enumerate()
            .fold(grid.zeros(), |acc, (i, (phi, ck))| {
                acc + phi * ((eig(i + 1) - lam2) * ck)
            }),
        SpectrumModel::GridConsistent => -apply_laplacian(grid, &u)? - &u * lam2,
    };
    let series_normalization = c
        .iter()
        .enumerate()
        .map(|(i, ck)| (eig(i + 1) - lam2) * ck * ck)
        .sum();
    let kernel = KernelSpec::new(
        KernelFamily::Counterexample {
            p: SpatialProfile::Samples {
                x: grid.nodes().to_vec(),
                values: p.iter().copied().collect(),
            },
        },
        -1.0,
        TimeProfile::Constant,
    )?;
    Ok(CounterexampleArtifacts {
        a,
        b,
        lambda_spec,
        n_modes: modes,
        model,
        normalization_value: h * p.dot(&u),
        series_normalization,
        c,
        u,
        u_xx,
        p,
        kernel,
        rescale,
    })
}

impl CounterexampleArtifacts {
    /// `‖−u'' + ∫K u dθ − λ²u‖ / ‖u‖`. The continuum model uses the exact
    /// `u''`; the grid model uses `Δ_h u`, for which the relation is exact.
    pub fn eigen_residual(&self, grid: &Grid1D) -> Result<f64> {
        let uxx = match self.model {
            SpectrumModel::Continuum => self.u_xx.clone(),
            SpectrumModel::GridConsistent => apply_laplacian(grid, &self.u)?,
        };
        let nonlocal = -&self.p * (grid.h() * self.p.dot(&self.u));
        let r = -uxx + nonlocal - &self.u * self.lambda_spec.powi(2);
        Ok(grid.norm(&r) / grid.norm(&self.u))
    }

    /// Largest `|⟨p, φ_k⟩ − (κ_k − λ²)c_k|` over the modes.
    pub fn mode_consistency(&self, grid: &Grid1D) -> f64 {
        let lam2 = self.lambda_spec.powi(2);
        (1..=self.n_modes)
            .map(|k| {
                let kappa = match self.model {
                    SpectrumModel::Continuum => (k as f64 * PI).powi(2),
                    SpectrumModel::GridConsistent => discrete_eigenvalue(grid, k),
                };
                (grid.h() * mode(grid, k).dot(&self.p) - (kappa - lam2) * self.c[k - 1]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn window(&self) -> ControlWindow {
        ControlWindow {
            a: self.a,
            b: self.b,
        }
    }

    /// Writes `x,u,p`.
    pub fn write_profiles_csv(&self, grid: &Grid1D, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "u", "p"])?;
        for (i, x) in grid.nodes().iter().enumerate() {
            w.write_record([x.to_string(), self.u[i].to_string(), self.p[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `K` on the grid as a time-independent table readable by
    /// [`TabulatedKernel::from_csv`].
    pub fn tabulated_kernel(&self, grid: &Grid1D) -> Result<TabulatedKernel> {
        let nodes = grid.nodes().to_vec();
        let values = self
            .p
            .iter()
            .flat_map(|pi| self.p.iter().map(move |pj| -pi * pj))
            .collect();
        TabulatedKernel::new(nodes.clone(), nodes, vec![0.0], values)
    }
}

/// Eigen-relation residual of the continuum model for each truncation.
pub fn residual_study(
    a: f64,
    b: f64,
    lambda_spec: f64,
    n_modes: &[usize],
    grid: &Grid1D,
) -> Result<Vec<(usize, f64)>> {
    n_modes
        .iter()
        .map(|&nm| {
            Ok((
                nm,
                build_counterexample(a, b, lambda_spec, nm, grid)?.eigen_residual(grid)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UcCheckConfig {
    pub epsilon_reg: Vec<f64>,
    pub hum_epsilons: Vec<f64>,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for UcCheckConfig {
    fn default() -> Self {
        Self {
            epsilon_reg: vec![1e-2, 1e-4, 1e-6],
            hum_epsilons: vec![1e-2, 1e-4, 1e-6, 1e-8],
            power_iters: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservabilityRow {
    pub epsilon_reg: f64,
    pub estimate: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StallRow {
    pub epsilon: f64,
    /// `‖y(T)‖ / ‖u‖`.
    pub relative_terminal_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UcFailureReport {
    pub max_abs_u_in_window: f64,
    pub norm_u_outside: f64,
    /// `max_t ‖φ(t) − e^{λ²t}u‖ / ‖e^{λ²t}u‖`.
    pub parabolic_max_rel_error: f64,
    /// `∬_{𝒪×(0,T)}|φ|² / ∬_Q|φ|²`.
    pub observation_ratio: f64,
    pub k_infinite: bool,
    pub observability: Vec<ObservabilityRow>,
    /// Largest over smallest estimate.
    pub observability_growth: f64,
    pub hum_stall: Vec<StallRow>,
    /// `(1 + dt·λ²)^{−m}`: the `u`-component of `y(T)` no control on `𝒪` can remove.
    pub stall_floor: f64,
}

/// Static, parabolic, observability and HUM checks of the construction.
pub fn verify_uc_failure(
    art: &CounterexampleArtifacts,
    grid: &Grid1D,
    time_grid: &TimeGrid,
    config: &UcCheckConfig,
) -> Result<UcFailureReport> {
    grid.check(&art.u)?;
    let window = art.window();
    let mask = window.mask(grid);
    let outside = mask.map(|v| 1.0 - v);
    let max_abs_u_in_window = art.u.component_mul(&mask).amax();
    let norm_u_outside = grid.norm(&art.u.component_mul(&outside));

    let scenario = Scenario::new(
        grid.clone(),
        time_grid.clone(),
        window,
        art.kernel.clone(),
        sigma_minus_for(1.0),
    )?;
    let op = ControlOperator::for_scenario(&scenario)?;
    let lam2 = art.lambda_spec.powi(2);
    let horizon = time_grid.horizon();
    let adjoint = op
        .propagator()
        .adjoint(&(&art.u * (lam2 * horizon).exp()))?;
    let parabolic_max_rel_error = adjoint
        .states
        .iter()
        .zip(time_grid.times())
        .map(|(phi, &t)| {
            let exact = &art.u * (lam2 * t).exp();
            grid.norm(&(phi - &exact)) / grid.norm(&exact)
        })
        .fold(0.0, f64::max);
    let dt = time_grid.dt();
    let total = adjoint.space_time_norm(grid, dt).powi(2);
    let observation_ratio = adjoint.masked_space_time_norm(grid, dt, &mask).powi(2) / total;

    let k_infinite =
        !compute_k_constant(&art.kernel, scenario.sigma_minus, grid, time_grid).is_finite();

    let observability = config
        .epsilon_reg
        .iter()
        .map(|&eps| {
            let est =
                estimate_observability_constant(&scenario, config.power_iters, eps, config.seed)?;
            Ok(ObservabilityRow {
                epsilon_reg: eps,
                estimate: est.value,
                converged: est.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = observability
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| {
            (lo.min(r.estimate), hi.max(r.estimate))
        });
    let observability_growth = if observability.is_empty() {
        1.0
    } else {
        hi / lo
    };

    let u_norm = grid.norm(&art.u);
    let hum_stall = config
        .hum_epsilons
        .iter()
        .map(|&eps| {
            let r = op.solve_penalized(
                &art.u,
                &SourceTerm::Zero,
                &HumConfig::new(eps, 1e-12, 4 * grid.n_interior() + 200)?,
            )?;
            Ok(StallRow {
                epsilon: eps,
                relative_terminal_norm: r.terminal_norm / u_norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stall_floor = (1.0 + dt * lam2).powi(-(time_grid.m_steps() as i32));

    Ok(UcFailureReport {
        max_abs_u_in_window,
        norm_u_outside,
        parabolic_max_rel_error,
        observation_ratio,
        k_infinite,
        observability,
        observability_growth,
        hum_stall,
        stall_floor,
    })
}
