//! Penalized HUM: the control is the restriction to 𝒪 of the adjoint state
//! whose terminal datum minimizes
//!
//! ```text
//! J_ε(φ_T) = ½∬_{𝒪×(0,T)} |φ|² + ∫_Ω y₀ φ(·,0) + (ε/2)‖φ_T‖².
//! ```
//!
//! Its optimality condition is `(Λ + εI)φ_T = −y_free(T)`, where the
//! Gramian `Λφ_T` is the terminal state reached from `y₀ = 0` under the
//! control `φ|_𝒪`. At the optimum `y(T) = −εφ_T`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::grid::{Field, Grid1D, TimeGrid};
use crate::kernels::compute_k_constant;
use crate::scenario::Scenario;
use crate::solver::{Dynamics, Propagator, SourceTerm, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumConfig {
    pub epsilon: f64,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iter")]
    pub cg_max_iter: usize,
}

fn default_cg_tol() -> f64 {
    1e-10
}

fn default_cg_max_iter() -> usize {
    2000
}

impl HumConfig {
    pub fn new(epsilon: f64, cg_tol: f64, cg_max_iter: usize) -> Result<Self> {
        let c = Self {
            epsilon,
            cg_tol,
            cg_max_iter,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_epsilon(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, default_cg_tol(), default_cg_max_iter())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(
                "hum.epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        if !(self.cg_tol > 0.0) {
            return Err(invalid(
                "hum.cg_tol",
                format!("must be positive, got {}", self.cg_tol),
            ));
        }
        if self.cg_max_iter == 0 {
            return Err(invalid("hum.cg_max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Field,
    pub iterations: usize,
    /// `‖r_k‖/‖b‖` after each iteration, starting with the initial residual.
    pub residual_history: Vec<f64>,
}

/// Conjugate gradient for a symmetric positive definite operator.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&Field) -> Result<Field>,
    rhs: &Field,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let b_norm = rhs.norm();
    let mut x = DVector::zeros(rhs.len());
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            residual_history: vec![0.0],
        });
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut history = vec![1.0];
    for it in 1..=max_iter {
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(invalid(
                "operator",
                format!("not positive definite (pᵀAp = {pap:e})"),
            ));
        }
        let step = rr / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rr_next = r.dot(&r);
        let rel = rr_next.sqrt() / b_norm;
        history.push(rel);
        if rel <= tol {
            return Ok(CgOutcome {
                solution: x,
                iterations: it,
                residual_history: history,
            });
        }
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
    }
    Err(Error::CgNotConverged {
        iterations: max_iter,
        last_residual: *history.last().unwrap(),
        history,
    })
}

/// Factorized dynamics plus the observation mask: everything needed to
/// apply the Gramian repeatedly.
pub struct ControlOperator<'a> {
    grid: &'a Grid1D,
    time_grid: &'a TimeGrid,
    mask: Field,
    propagator: Propagator,
}

impl<'a> ControlOperator<'a> {
    pub fn new(
        grid: &'a Grid1D,
        time_grid: &'a TimeGrid,
        mask: Field,
        dynamics: &Dynamics<'_>,
    ) -> Result<Self> {
        grid.check(&mask)?;
        Ok(Self {
            grid,
            time_grid,
            mask,
            propagator: Propagator::new(grid, time_grid, dynamics)?,
        })
    }

    pub fn for_scenario(scenario: &'a Scenario) -> Result<Self> {
        Self::new(
            &scenario.grid,
            &scenario.time_grid,
            scenario.mask(),
            &scenario.dynamics(),
        )
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn mask(&self) -> &Field {
        &self.mask
    }

    /// Control `1_𝒪·φ` generated by terminal datum `φ_T`, with its adjoint.
    pub fn control_from(&self, phi_t: &Field) -> Result<(SourceTerm, Trajectory)> {
        let adjoint = self.propagator.adjoint(phi_t)?;
        Ok((
            SourceTerm::restricted_adjoint(&adjoint, &self.mask),
            adjoint,
        ))
    }

    /// `Λφ_T`.
    pub fn gramian_apply(&self, phi_t: &Field) -> Result<Field> {
        let (control, _) = self.control_from(phi_t)?;
        Ok(self
            .propagator
            .forward(&self.grid.zeros(), &control)?
            .terminal()
            .clone())
    }

    /// `∬_{𝒪×(0,T)} |φ|²` in the scheme's pairing, i.e. `⟨Λφ_T, φ_T⟩`.
    pub fn observation(&self, adjoint: &Trajectory) -> f64 {
        let m = self.time_grid.m_steps();
        let h = self.grid.h();
        self.time_grid.dt()
            * adjoint.states[..m]
                .iter()
                .map(|phi| h * phi.component_mul(&self.mask).norm_squared())
                .sum::<f64>()
    }

    /// Uncontrolled terminal state from `y0` under `source`.
    pub fn free_terminal(&self, y0: &Field, source: &SourceTerm) -> Result<Field> {
        Ok(self.propagator.forward(y0, source)?.terminal().clone())
    }

    /// Penalized HUM with an optional fixed source in the state equation.
    pub fn solve_penalized(
        &self,
        y0: &Field,
        source: &SourceTerm,
        config: &HumConfig,
    ) -> Result<HumResult> {
        config.validate()?;
        self.grid.check(y0)?;
        let rhs = -self.free_terminal(y0, source)?;
        let eps = config.epsilon;
        let cg = conjugate_gradient(
            |p| Ok(self.gramian_apply(p)? + p * eps),
            &rhs,
            config.cg_tol,
            config.cg_max_iter,
        )?;
        let (control, _) = self.control_from(&cg.solution)?;
        let total = add_sources(source, &control);
        let controlled = self.propagator.forward(y0, &total)?;
        let terminal_norm = self.grid.norm(controlled.terminal());
        let cost = control.norm(self.grid, self.time_grid.dt());
        let SourceTerm::Steps(control) = control else {
            unreachable!("restricted adjoint always has steps")
        };
        Ok(HumResult {
            terminal_norm,
            cost,
            cg_iterations: cg.iterations,
            residual_history: cg.residual_history,
            phi_t_opt: cg.solution,
            control,
            controlled,
            observability_estimate: None,
            warnings: Vec::new(),
        })
    }
}

pub(crate) fn add_sources(a: &SourceTerm, b: &SourceTerm) -> SourceTerm {
    match (a, b) {
        (SourceTerm::Zero, other) | (other, SourceTerm::Zero) => other.clone(),
        (SourceTerm::Steps(x), SourceTerm::Steps(y)) => {
            SourceTerm::Steps(x.iter().zip(y).map(|(p, q)| p + q).collect())
        }
    }
}

#[derive(Debug, Clone)]
pub struct HumResult {
    pub phi_t_opt: Field,
    /// `control[k−1]` acts on step `k`; zero outside 𝒪.
    pub control: Vec<Field>,
    pub controlled: Trajectory,
    pub terminal_norm: f64,
    pub cost: f64,
    pub cg_iterations: usize,
    pub residual_history: Vec<f64>,
    pub observability_estimate: Option<f64>,
    pub warnings: Vec<String>,
}

impl HumResult {
    pub fn summary(&self, grid: &Grid1D) -> HumSummary {
        HumSummary {
            terminal_norm: self.terminal_norm,
            cost: self.cost,
            cg_iterations: self.cg_iterations,
            phi_t_opt_norm: grid.norm(&self.phi_t_opt),
            observability_estimate: self.observability_estimate,
            residual_history: self.residual_history.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// JSON-facing scalars of a [`HumResult`].
#[derive(Debug, Clone, Serialize)]
pub struct HumSummary {
    pub terminal_norm: f64,
    pub cost: f64,
    pub cg_iterations: usize,
    pub phi_t_opt_norm: f64,
    pub observability_estimate: Option<f64>,
    pub residual_history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// `Λφ_T` for the scenario (one adjoint and one forward solve).
pub fn gramian_apply(phi_t: &Field, scenario: &Scenario) -> Result<Field> {
    ControlOperator::for_scenario(scenario)?.gramian_apply(phi_t)
}

/// Penalized null control of `y0`. Proceeds with a warning when the kernel
/// violates the admissibility hypothesis.
pub fn compute_null_control(
    y0: &Field,
    config: &HumConfig,
    scenario: &Scenario,
) -> Result<HumResult> {
    let op = ControlOperator::for_scenario(scenario)?;
    let mut result = op.solve_penalized(y0, &SourceTerm::Zero, config)?;
    if !compute_k_constant(
        &scenario.kernel,
        scenario.sigma_minus,
        &scenario.grid,
        &scenario.time_grid,
    )
    .is_finite()
    {
        result
            .warnings
            .push("kernel violates hypothesis (H): admissibility constant is infinite".to_string());
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservabilityEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// Largest generalized Rayleigh quotient
/// `‖φ(·,0)‖² / (∬_𝒪|φ|² + ε_reg‖φ_T‖²)`, by power iteration on
/// `(Λ + ε_reg I)⁻¹ SᵀS` with `S: φ_T ↦ φ(·,0)`.
///
/// `Λ + ε_reg I` is assembled column by column and Cholesky-factored once.
pub fn estimate_observability_constant(
    scenario: &Scenario,
    power_iters: usize,
    epsilon_reg: f64,
    seed: u64,
) -> Result<ObservabilityEstimate> {
    if power_iters < 10 {
        return Err(invalid(
            "power_iters",
            format!("need at least 10, got {power_iters}"),
        ));
    }
    if !(epsilon_reg > 0.0) {
        return Err(invalid(
            "epsilon_reg",
            format!("must be positive, got {epsilon_reg}"),
        ));
    }
    let op = ControlOperator::for_scenario(scenario)?;
    let n = scenario.grid.n_interior();
    let columns: Vec<Field> = (0..n)
        .into_par_iter()
        .map(|j| op.gramian_apply(&DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })))
        .collect::<Result<_>>()?;
    let mut reg = DMatrix::from_columns(&columns);
    reg = 0.5 * (&reg + reg.transpose());
    for i in 0..n {
        reg[(i, i)] += epsilon_reg;
    }
    let chol = Cholesky::new(reg.clone()).ok_or_else(|| {
        invalid(
            "epsilon_reg",
            "regularized Gramian is not positive definite",
        )
    })?;

    let prop = op.propagator();
    let zero = SourceTerm::Zero;
    let sts = |x: &Field| -> Result<Field> {
        let phi0 = prop.adjoint(x)?.initial().clone();
        Ok(prop.forward(&phi0, &zero)?.terminal().clone())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    x /= x.norm();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..power_iters {
        let z = sts(&x)?;
        let num = x.dot(&z);
        let den = x.dot(&(&reg * &x));
        let q = num / den;
        let done = history
            .last()
            .is_some_and(|&prev: &f64| (q - prev).abs() <= 1e-9 * q.abs());
        history.push(q);
        if done {
            converged = true;
            break;
        }
        x = chol.solve(&z);
        let nx = x.norm();
        if nx == 0.0 {
            converged = true;
            break;
        }
        x /= nx;
    }
    Ok(ObservabilityEstimate {
        value: *history.last().unwrap_or(&0.0),
        iterations: history.len(),
        converged,
        history,
    })
}

/// Dense `Λ`, assembled by applying the Gramian to each unit vector.
pub fn assemble_gramian(scenario: &Scenario) -> Result<DMatrix<f64>> {
    let op = ControlOperator::for_scenario(scenario)?;
    let n = scenario.grid.n_interior();
    let cols: Vec<Field> = (0..n)
        .into_par_iter()
        .map(|j| op.gramian_apply(&DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })))
        .collect::<Result<_>>()?;
    check_len(n, cols.len())?;
    Ok(DMatrix::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec, TimeProfile};
    use crate::solver::duality_gap;
    use std::f64::consts::PI;

    #[test]
    fn cg_solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let out = conjugate_gradient(|p| Ok(&a * p), &b, 1e-14, 10).unwrap();
        assert!((&a * &out.solution - &b).norm() < 1e-12);
        assert!(out.iterations <= 3);
        let zero = conjugate_gradient(|p| Ok(&a * p), &DVector::zeros(3), 1e-14, 10).unwrap();
        assert_eq!(zero.iterations, 0);
    }

    #[test]
    fn cg_reports_non_convergence() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0, 100.0, 1000.0]));
        let b = DVector::from_element(4, 1.0);
        match conjugate_gradient(|p| Ok(&a * p), &b, 1e-15, 2) {
            Err(Error::CgNotConverged {
                iterations,
                history,
                ..
            }) => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gramian_of_zero_is_zero() {
        let sc = Scenario::heat(8, 10, 0.5, 0.3, 0.8).unwrap();
        assert_eq!(
            gramian_apply(&sc.grid.zeros(), &sc).unwrap(),
            sc.grid.zeros()
        );
    }

    #[test]
    fn gramian_symmetric_psd_with_kernel() {
        let sc = Scenario::heat(14, 20, 0.5, 0.3, 0.8).unwrap().with_kernel(
            KernelSpec::new(
                KernelFamily::GaussianBump { rho: 0.2 },
                3.0,
                TimeProfile::Constant,
            )
            .unwrap(),
        );
        let g = &sc.grid;
        let a = g.sample(|x| (3.0 * x).sin() + x);
        let b = g.sample(|x| (7.0 * x * x).cos());
        let la = gramian_apply(&a, &sc).unwrap();
        let lb = gramian_apply(&b, &sc).unwrap();
        let (ab, ba) = (la.dot(&b), a.dot(&lb));
        assert!((ab - ba).abs() < 1e-9 * ab.abs().max(ba.abs()));
        assert!(la.dot(&a) >= 0.0 && lb.dot(&b) >= 0.0);
    }

    #[test]
    fn gramian_quadratic_form_is_observation() {
        let sc = Scenario::heat(10, 16, 0.4, 0.2, 0.6).unwrap();
        let op = ControlOperator::for_scenario(&sc).unwrap();
        let phi_t = sc.grid.sample(|x| x * (1.0 - x) * (5.0 * x).cos());
        let (control, adjoint) = op.control_from(&phi_t).unwrap();
        let forward = op.propagator().forward(&sc.grid.zeros(), &control).unwrap();
        let gap = duality_gap(&sc.grid, &sc.time_grid, &forward, &adjoint, &control).unwrap();
        assert!(gap < 1e-14);
        let quad = sc.grid.h() * op.gramian_apply(&phi_t).unwrap().dot(&phi_t);
        assert!((quad - op.observation(&adjoint)).abs() < 1e-13 * quad);
    }

    #[test]
    fn zero_initial_state_needs_no_control() {
        let sc = Scenario::heat(8, 10, 0.5, 0.3, 0.8).unwrap();
        let r = compute_null_control(
            &sc.grid.zeros(),
            &HumConfig::with_epsilon(1e-4).unwrap(),
            &sc,
        )
        .unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.terminal_norm, 0.0);
        assert_eq!(r.cg_iterations, 0);
    }

    #[test]
    fn optimality_identity_and_support() {
        let sc = Scenario::heat(20, 40, 0.5, 0.3, 0.8).unwrap();
        let y0 = sc.grid.sample(|x| (PI * x).sin());
        let cfg = HumConfig::new(1e-4, 1e-12, 500).unwrap();
        let r = compute_null_control(&y0, &cfg, &sc).unwrap();
        let expected = cfg.epsilon * sc.grid.norm(&r.phi_t_opt);
        assert!((r.terminal_norm - expected).abs() < 1e-9 * sc.grid.norm(&y0));
        let target = -&r.phi_t_opt * cfg.epsilon;
        assert!((r.controlled.terminal() - target).amax() < 1e-9);
        let mask = sc.mask();
        for v in &r.control {
            for (vi, mi) in v.iter().zip(mask.iter()) {
                if *mi == 0.0 {
                    assert_eq!(*vi, 0.0);
                }
            }
        }
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn cost_grows_as_penalty_shrinks() {
        let sc = Scenario::heat(16, 32, 0.5, 0.3, 0.8).unwrap();
        let y0 = sc.grid.sample(|x| (PI * x).sin());
        let costs: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&e| {
                compute_null_control(&y0, &HumConfig::new(e, 1e-12, 1000).unwrap(), &sc)
                    .unwrap()
                    .cost
            })
            .collect();
        assert!(costs.windows(2).all(|w| w[1] >= w[0]), "{costs:?}");
    }

    #[test]
    fn cost_homogeneous_in_data() {
        let sc = Scenario::heat(12, 24, 0.5, 0.3, 0.8).unwrap();
        let y0 = sc.grid.sample(|x| x * (1.0 - x));
        let cfg = HumConfig::new(1e-3, 1e-13, 500).unwrap();
        let c1 = compute_null_control(&y0, &cfg, &sc).unwrap().cost;
        let c2 = compute_null_control(&(&y0 * -3.0), &cfg, &sc).unwrap().cost;
        assert!((c2 - 3.0 * c1).abs() < 1e-8 * c2);
    }

    #[test]
    fn inadmissible_kernel_warns() {
        let sc = Scenario::heat(8, 10, 0.5, 0.3, 0.8).unwrap().with_kernel(
            KernelSpec::new(
                KernelFamily::GaussianBump { rho: 0.2 },
                1.0,
                TimeProfile::Constant,
            )
            .unwrap(),
        );
        let y0 = sc.grid.sample(|x| (PI * x).sin());
        let r = compute_null_control(&y0, &HumConfig::with_epsilon(1e-3).unwrap(), &sc).unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn observability_validation() {
        let sc = Scenario::heat(8, 10, 0.5, 0.3, 0.8).unwrap();
        assert!(estimate_observability_constant(&sc, 5, 1e-6, 0).is_err());
        assert!(estimate_observability_constant(&sc, 20, 0.0, 0).is_err());
    }

    #[test]
    fn observability_matches_dense_generalized_eigenvalue() {
        let sc = Scenario::heat(10, 20, 0.5, 0.2, 0.5).unwrap();
        let eps = 1e-4;
        let est = estimate_observability_constant(&sc, 500, eps, 3).unwrap();
        assert!(est.converged);
        // oracle: dense SᵀS and Λ, symmetric reduction through Cholesky
        let n = sc.grid.n_interior();
        let op = ControlOperator::for_scenario(&sc).unwrap();
        let mut lam = assemble_gramian(&sc).unwrap();
        lam = 0.5 * (&lam + lam.transpose());
        let mut sts = DMatrix::zeros(n, n);
        for j in 0..n {
            let e = DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
            let phi0 = op.propagator().adjoint(&e).unwrap().initial().clone();
            sts.set_column(j, &phi0);
        }
        let sts = sts.transpose() * &sts;
        let l = Cholesky::new(lam + DMatrix::identity(n, n) * eps)
            .unwrap()
            .l();
        let linv = l.clone().try_inverse().unwrap();
        let reduced = &linv * sts * linv.transpose();
        let top = reduced
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::MIN, f64::max);
        assert!(
            (est.value - top).abs() < 1e-6 * top,
            "{} vs {}",
            est.value,
            top
        );
    }
}
