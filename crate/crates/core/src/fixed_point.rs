//! Picard realizations of the weighted-space control (kernel decaying only
//! at `t = T`) and of the semilinear control loops.
//!
//! Both loops iterate a map `η ↦ y(η)` where `y(η)` is a controlled
//! trajectory whose control is computed with `η` frozen. When the map does
//! not depend on `η` (zero kernel, zero nonlinearity) one application is
//! already the fixed point and the loop stops after one iteration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::carleman::{build_weights, CarlemanParams};
use crate::error::{invalid, Error, Result};
use crate::grid::{Field, Grid1D, TimeGrid};
use crate::hum::{ControlOperator, HumConfig};
use crate::kernels::{
    compute_k_constant, compute_m_constant, kernel_matrix_at, KernelSpec, TimeProfile,
};
use crate::scenario::Scenario;
use crate::solver::{step_matrix, Dynamics, SourceTerm, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    Zero,
    /// `L·tanh(s)`
    ScaledTanh {
        lipschitz: f64,
    },
    /// `L·sin(s)`
    ScaledSin {
        lipschitz: f64,
    },
}

/// Where the nonlinearity enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `y_t − Δy + ∫K y = f(y) + v1_𝒪`
    #[default]
    Additive,
    /// `y_t − Δy + ∫K f(y) = v1_𝒪`
    InsideNonlocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemilinearSpec {
    pub f: Nonlinearity,
    #[serde(default)]
    pub variant: Variant,
}

impl SemilinearSpec {
    pub fn zero() -> Self {
        Self {
            f: Nonlinearity::Zero,
            variant: Variant::Additive,
        }
    }

    pub fn scaled_tanh(lipschitz: f64) -> Result<Self> {
        Self::new(Nonlinearity::ScaledTanh { lipschitz }, Variant::Additive)
    }

    pub fn scaled_sin(lipschitz: f64) -> Result<Self> {
        Self::new(Nonlinearity::ScaledSin { lipschitz }, Variant::Additive)
    }

    pub fn new(f: Nonlinearity, variant: Variant) -> Result<Self> {
        let spec = Self { f, variant };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lipschitz();
        if !(l >= 0.0 && l.is_finite()) {
            return Err(invalid(
                "semilinear.f.lipschitz",
                format!("must be finite and non-negative, got {l}"),
            ));
        }
        Ok(())
    }

    pub fn lipschitz(&self) -> f64 {
        match self.f {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::ScaledTanh { lipschitz } | Nonlinearity::ScaledSin { lipschitz } => {
                lipschitz
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lipschitz() == 0.0
    }

    pub fn f(&self, s: f64) -> f64 {
        match self.f {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::ScaledTanh { lipschitz } => lipschitz * s.tanh(),
            Nonlinearity::ScaledSin { lipschitz } => lipschitz * s.sin(),
        }
    }

    pub fn df(&self, s: f64) -> f64 {
        match self.f {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::ScaledTanh { lipschitz } => lipschitz / s.cosh().powi(2),
            Nonlinearity::ScaledSin { lipschitz } => lipschitz * s.cos(),
        }
    }
}

/// `g(s) = f(s)/s`, extended by `f′(0)` at zero.
pub fn g_of(spec: &SemilinearSpec, s: f64) -> f64 {
    if s == 0.0 {
        return spec.df(0.0);
    }
    // f(s)/s loses all digits near zero; the series is exact there
    if s.abs() < 1e-4 {
        let s2 = s * s;
        return match spec.f {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::ScaledTanh { lipschitz } => {
                lipschitz * (1.0 - s2 / 3.0 + 2.0 * s2 * s2 / 15.0)
            }
            Nonlinearity::ScaledSin { lipschitz } => lipschitz * (1.0 - s2 / 6.0 + s2 * s2 / 120.0),
        };
    }
    spec.f(s) / s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iter: 30,
            tol: 1e-8,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(invalid("fixed_point.max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(
                "fixed_point.tol",
                format!("must be positive, got {}", self.tol),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// Discrete `L²(Q)` norm of `η_{k+1} − η_k`.
    pub update_norms: Vec<f64>,
    pub converged: bool,
    pub final_terminal_norm: f64,
    pub final_cost: f64,
    /// `ln ∬ e^{2sβ}|y|²` of the last iterate (weighted loop only). The
    /// norm itself overflows `f64` for any realistic `s` near `t = T`.
    pub weighted_state_log_norm: Option<f64>,
    /// Natural log of the weighted norm at every iterate.
    pub weighted_log_norms: Vec<f64>,
    /// All weighted norms finite, spread within one decade.
    pub weighted_norm_bounded: Option<bool>,
    /// `T + T² + (𝒦‖g‖∞)^{2/3}T²`, the shape of the lower bound on `s`
    /// for the inside-nonlocal variant.
    pub s_lower_bound_shape: Option<f64>,
    #[serde(skip)]
    pub control: Vec<Field>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

fn update_norm(a: &Trajectory, b: &Trajectory, grid: &Grid1D, dt: f64) -> f64 {
    a.distance(b, grid, dt)
        .expect("iterates share the time grid")
}

/// `ln(dt·h·Σ_{j<m} Σ_i e^{2sβ_ij} y_ij²)`; the `t = T` column is excluded
/// because `β` is infinite there.
pub fn weighted_log_norm(
    traj: &Trajectory,
    beta: &DMatrix<f64>,
    s: f64,
    grid: &Grid1D,
    dt: f64,
) -> f64 {
    let m = traj.states.len() - 1;
    let terms: Vec<f64> = (0..m)
        .flat_map(|j| {
            traj.states[j]
                .iter()
                .enumerate()
                .filter(|(_, y)| **y != 0.0)
                .map(move |(i, y)| 2.0 * s * beta[(i, j)] + 2.0 * y.abs().ln())
        })
        .collect();
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    peak + terms.iter().map(|v| (v - peak).exp()).sum::<f64>().ln() + (dt * grid.h()).ln()
}

/// Weighted-space control: `w₀ = 0`; each iteration freezes `F = −∫K w dθ`
/// as a source, computes the penalized HUM control of the heat equation
/// with that source and sets `w` to the controlled trajectory.
pub fn weighted_control_iteration(
    y0: &Field,
    scenario: &Scenario,
    b: f64,
    params: &CarlemanParams,
    hum: &HumConfig,
    config: &FixedPointConfig,
) -> Result<FixedPointReport> {
    config.validate()?;
    let (grid, tg) = (&scenario.grid, &scenario.time_grid);
    if !compute_m_constant(&scenario.kernel, b, scenario.sigma_minus, grid, tg)?.is_finite() {
        return Err(invalid(
            "kernel",
            format!("constant 𝓜 is infinite for B = {b}"),
        ));
    }
    let heat = KernelSpec::zero();
    let op = ControlOperator::new(
        grid,
        tg,
        scenario.mask(),
        &Dynamics::new(&heat, scenario.ctx()),
    )?;
    let weights = build_weights(params, grid, tg)?;
    let ctx = scenario.ctx();
    let kernels: Vec<DMatrix<f64>> = (1..=tg.m_steps())
        .map(|k| kernel_matrix_at(&scenario.kernel, grid, tg.times()[k], &ctx))
        .collect();
    let dt = tg.dt();
    let inert = scenario.kernel.is_zero();

    let mut w: Option<Trajectory> = None;
    let mut update_norms = Vec::new();
    let mut logs = Vec::new();
    let mut converged = false;
    let mut last = None;
    for _ in 0..config.max_iter {
        let source = match &w {
            None => SourceTerm::Zero,
            Some(w) => SourceTerm::Steps(
                kernels
                    .iter()
                    .enumerate()
                    .map(|(k, km)| -(km * &w.states[k + 1]))
                    .collect(),
            ),
        };
        let result = op.solve_penalized(y0, &source, hum)?;
        let next = result.controlled.clone();
        logs.push(weighted_log_norm(&next, &weights.beta, params.s, grid, dt));
        let upd = match &w {
            None => {
                let zero = Trajectory {
                    states: vec![grid.zeros(); tg.m_steps() + 1],
                    kind: next.kind,
                };
                update_norm(&next, &zero, grid, dt)
            }
            Some(prev) => update_norm(&next, prev, grid, dt),
        };
        update_norms.push(upd);
        w = Some(next);
        last = Some(result);
        if inert || upd < config.tol {
            converged = true;
            break;
        }
    }
    let result = last.expect("at least one iteration");
    let finite = logs.iter().all(|v| v.is_finite());
    let spread = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - logs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FixedPointReport {
        iterations: update_norms.len(),
        update_norms,
        converged,
        final_terminal_norm: result.terminal_norm,
        final_cost: result.cost,
        weighted_state_log_norm: logs.last().copied(),
        weighted_norm_bounded: Some(finite && spread <= std::f64::consts::LN_10),
        weighted_log_norms: logs,
        s_lower_bound_shape: None,
        control: result.control,
        trajectory: w,
    })
}

/// One fully implicit semilinear step, solved by Newton's method.
fn semilinear_step(
    grid: &Grid1D,
    tg: &TimeGrid,
    scenario: &Scenario,
    spec: &SemilinearSpec,
    k: usize,
    prev: &Field,
    control: &Field,
) -> Result<Field> {
    let dt = tg.dt();
    let rhs = prev + control * dt;
    let kernel_on = !scenario.kernel.is_zero();
    let (base, kmat) = match spec.variant {
        Variant::Additive => (step_matrix(grid, tg, &scenario.dynamics(), k), None),
        Variant::InsideNonlocal => {
            let zero = KernelSpec::zero();
            let heat = step_matrix(grid, tg, &Dynamics::new(&zero, scenario.ctx()), k);
            let km = kernel_on.then(|| {
                kernel_matrix_at(&scenario.kernel, grid, tg.times()[k], &scenario.ctx()) * dt
            });
            (heat, km)
        }
    };
    let residual = |y: &Field| -> Field {
        let fy = y.map(|v| spec.f(v));
        match (&spec.variant, &kmat) {
            (Variant::Additive, _) => &base * y - fy * dt - &rhs,
            (Variant::InsideNonlocal, Some(km)) => &base * y + km * fy - &rhs,
            (Variant::InsideNonlocal, None) => &base * y - &rhs,
        }
    };
    let scale = rhs.amax().max(f64::MIN_POSITIVE);
    let mut y = prev.clone();
    for _ in 0..50 {
        let r = residual(&y);
        if r.amax() <= 1e-14 * scale {
            return Ok(y);
        }
        let dfy = y.map(|v| spec.df(v));
        let mut jac = base.clone();
        match (&spec.variant, &kmat) {
            (Variant::Additive, _) => {
                for i in 0..y.len() {
                    jac[(i, i)] -= dt * dfy[i];
                }
            }
            (Variant::InsideNonlocal, Some(km)) => {
                let mut kd = km.clone();
                for (j, mut col) in kd.column_iter_mut().enumerate() {
                    col *= dfy[j];
                }
                jac += kd;
            }
            (Variant::InsideNonlocal, None) => {}
        }
        let delta = jac.lu().solve(&r).ok_or(Error::NewtonFailed { step: k })?;
        y -= delta;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NewtonFailed { step: k });
        }
    }
    if residual(&y).amax() <= 1e-10 * scale {
        Ok(y)
    } else {
        Err(Error::NewtonFailed { step: k })
    }
}

/// Semilinear trajectory from `y0` under the given control.
pub fn solve_semilinear(
    y0: &Field,
    scenario: &Scenario,
    spec: &SemilinearSpec,
    control: &[Field],
) -> Result<Trajectory> {
    let (grid, tg) = (&scenario.grid, &scenario.time_grid);
    grid.check(y0)?;
    crate::error::check_len(tg.m_steps(), control.len())?;
    let mut states = vec![y0.clone()];
    for k in 1..=tg.m_steps() {
        let next = semilinear_step(grid, tg, scenario, spec, k, &states[k - 1], &control[k - 1])?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        kind: crate::solver::TrajectoryKind::Forward,
    })
}

/// Semilinear control loop: `η₀ = 0`; each iteration builds `g(η)`, computes
/// the penalized HUM control of the linearized system and evolves the
/// semilinear system under it to obtain the next `η`.
pub fn semilinear_control_iteration(
    y0: &Field,
    spec: &SemilinearSpec,
    scenario: &Scenario,
    hum: &HumConfig,
    config: &FixedPointConfig,
) -> Result<FixedPointReport> {
    config.validate()?;
    spec.validate()?;
    let (grid, tg) = (&scenario.grid, &scenario.time_grid);
    let n = grid.n_interior();
    let m = tg.m_steps();
    let dt = tg.dt();
    let k_const = compute_k_constant(&scenario.kernel, scenario.sigma_minus, grid, tg);
    let inert =
        spec.is_zero() || (spec.variant == Variant::InsideNonlocal && scenario.kernel.is_zero());
    let mask = scenario.mask();

    let mut eta: Option<Trajectory> = None;
    let mut update_norms = Vec::new();
    let mut converged = false;
    let mut last: Option<(Vec<Field>, Trajectory)> = None;
    for _ in 0..config.max_iter {
        let g: Vec<Field> = match &eta {
            None => vec![Field::from_element(n, g_of(spec, 0.0)); m + 1],
            Some(e) => e.states.iter().map(|s| s.map(|v| g_of(spec, v))).collect(),
        };
        let base = scenario.dynamics();
        let dynamics = match (inert, spec.variant) {
            (true, _) => base,
            (false, Variant::Additive) => base.with_potential(&g),
            (false, Variant::InsideNonlocal) => base.with_nonlocal_weight(&g),
        };
        let op = ControlOperator::new(grid, tg, mask.clone(), &dynamics)?;
        let result = op.solve_penalized(y0, &SourceTerm::Zero, hum)?;
        let control = result.control;
        let next = if inert {
            result.controlled
        } else {
            solve_semilinear(y0, scenario, spec, &control)?
        };
        let upd = match &eta {
            None => (dt
                * next.states[1..]
                    .iter()
                    .map(|s| grid.h() * s.norm_squared())
                    .sum::<f64>())
            .sqrt(),
            Some(prev) => update_norm(&next, prev, grid, dt),
        };
        update_norms.push(upd);
        eta = Some(next.clone());
        last = Some((control, next));
        if inert || upd < config.tol {
            converged = true;
            break;
        }
    }
    let (control, traj) = last.expect("at least one iteration");
    let g_sup = spec.lipschitz();
    let horizon = tg.horizon();
    let s_lower_bound_shape = (spec.variant == Variant::InsideNonlocal)
        .then(|| k_const.value())
        .flatten()
        .map(|k| horizon + horizon * horizon + (k * g_sup).powf(2.0 / 3.0) * horizon * horizon);
    let final_cost = SourceTerm::Steps(control.clone()).norm(grid, dt);
    Ok(FixedPointReport {
        iterations: update_norms.len(),
        update_norms,
        converged,
        final_terminal_norm: grid.norm(traj.terminal()),
        final_cost,
        weighted_state_log_norm: None,
        weighted_log_norms: Vec::new(),
        weighted_norm_bounded: None,
        s_lower_bound_shape,
        control,
        trajectory: Some(traj),
    })
}

/// `terminal_decay` kernels are the intended input of the weighted loop.
pub fn is_terminal_decay(spec: &KernelSpec) -> bool {
    matches!(spec.time_profile, TimeProfile::TerminalDecay { .. })
}
