//! Carleman weights built from a Fursikov–Imanuvilov auxiliary function.
//!
//! With `N = ‖η⁰‖∞` and a parameter `λ > 0`:
//!
//! ```text
//! σ(x)   = e^{4λN} − e^{λ(2N+η⁰(x))}        σ⁺ = e^{4λN} − e^{2λN}   σ⁻ = e^{4λN} − e^{3λN}
//! α(x,t) = σ(x)/(t(T−t))                     ξ(x,t) = e^{λ(2N+η⁰(x))}/(t(T−t))
//! β(x,t) = σ(x)/ℓ(t)                         γ(x,t) = e^{λ(2N+η⁰(x))}/ℓ(t)
//! ℓ(t)   = T²/4 on [0,T/2],  t(T−t) on [T/2,T]
//! ```
//!
//! Differences of exponentials are formed with `expm1` so that σ± keep full
//! relative precision for small λ. Quantities that would overflow are
//! compared through their exponents.

use nalgebra::DMatrix;

use crate::error::{check_len, invalid, Result};
use crate::grid::{ControlWindow, Field, Grid1D, TimeGrid};
use crate::solver::Trajectory;

/// Auxiliary function `η⁰(x) = c·x^r(1−x)^w`, positive in (0,1), zero at the
/// boundary, with its only critical point at the window midpoint and
/// `max η⁰ = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxiliaryFunction {
    pub r: f64,
    pub w: f64,
    peak: f64,
    log_c: f64,
}

impl AuxiliaryFunction {
    pub fn for_window(window: &ControlWindow) -> Self {
        let peak = window.midpoint();
        let (r, w) = if peak >= 0.5 {
            (2.0 * peak / (1.0 - peak), 2.0)
        } else {
            (2.0, 2.0 * (1.0 - peak) / peak)
        };
        let log_c = -(r * peak.ln() + w * (1.0 - peak).ln());
        Self { r, w, peak, log_c }
    }

    /// Location of the unique interior critical point, `r/(r+w)`.
    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// Supremum over Ω̄; equal to one by normalization.
    pub fn sup(&self) -> f64 {
        1.0
    }

    pub fn value(&self, x: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        (self.log_c + self.r * x.ln() + self.w * (1.0 - x).ln()).exp()
    }

    pub fn derivative(&self, x: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        self.value(x) * (self.r / x - self.w / (1.0 - x))
    }
}

/// Samples of η⁰ at the interior nodes.
pub fn build_eta0(grid: &Grid1D, window: &ControlWindow) -> Result<Field> {
    window.validate_for(grid)?;
    let aux = AuxiliaryFunction::for_window(window);
    Ok(grid.sample(|x| aux.value(x)))
}

/// `F(λ) = (e^{2λN} − e^{λN})/(e^{2λN} − 1)`, the ratio `σ⁻/σ⁺`.
///
/// Algebraically `F(λ) = 1/(1 + e^{−λN})`, which is the form evaluated.
pub fn f_lambda(lambda: f64, eta0_sup: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    if !(eta0_sup > 0.0 && eta0_sup.is_finite()) {
        return Err(invalid(
            "eta0_sup",
            format!("must be positive, got {eta0_sup}"),
        ));
    }
    Ok(1.0 / (1.0 + (-lambda * eta0_sup).exp()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanParams {
    pub lambda: f64,
    pub s: f64,
    pub eta0: Field,
    pub eta0_sup: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
}

impl CarlemanParams {
    pub fn new(lambda: f64, s: f64, eta0: Field, eta0_sup: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be positive, got {lambda}")));
        }
        if !(s > 1.0 && s.is_finite()) {
            return Err(invalid("s", format!("must exceed 1, got {s}")));
        }
        if eta0.iter().any(|&v| !(v > 0.0 && v <= eta0_sup)) {
            return Err(invalid("eta0", "must lie in (0, eta0_sup] at every node"));
        }
        let n = eta0_sup;
        let sigma_plus = (2.0 * lambda * n).exp() * (2.0 * lambda * n).exp_m1();
        let sigma_minus = (3.0 * lambda * n).exp() * (lambda * n).exp_m1();
        if !sigma_plus.is_finite() {
            return Err(invalid("lambda", format!("σ⁺ overflows at λ = {lambda}")));
        }
        Ok(Self {
            lambda,
            s,
            eta0,
            eta0_sup,
            sigma_plus,
            sigma_minus,
        })
    }

    pub fn for_window(lambda: f64, s: f64, grid: &Grid1D, window: &ControlWindow) -> Result<Self> {
        let aux = AuxiliaryFunction::for_window(window);
        let eta0 = build_eta0(grid, window)?;
        Self::new(lambda, s, eta0, aux.sup())
    }

    pub fn f_lambda(&self) -> f64 {
        f_lambda(self.lambda, self.eta0_sup).expect("validated at construction")
    }

    /// `e^{λ(2N+η⁰(x))}` at each node.
    pub fn exp_weight(&self) -> Field {
        self.eta0
            .map(|e| (self.lambda * (2.0 * self.eta0_sup + e)).exp())
    }

    /// `σ(x)` at each node.
    pub fn sigma(&self) -> Field {
        let l = self.lambda;
        let n = self.eta0_sup;
        self.eta0
            .map(|e| (l * (2.0 * n + e)).exp() * (l * (2.0 * n - e)).exp_m1())
    }
}

/// Outcome of evaluating `exp(−(1+s)σ⁻/τ) < exp(−sσ⁺/τ)` on a time grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MinMaxReport {
    pub passed: bool,
    /// `−sσ⁺/τ + (1+s)σ⁻/τ` at each interior time; positive where the
    /// strict inequality holds.
    pub margins: Vec<f64>,
    pub failures: usize,
}

/// Compares the two sides through their exponents at each interior time node.
pub fn check_min_max_inequality(
    params: &CarlemanParams,
    time_grid: &TimeGrid,
) -> Result<MinMaxReport> {
    min_max_margins(params.s, params.sigma_plus, params.sigma_minus, time_grid)
}

pub(crate) fn min_max_margins(
    s: f64,
    sigma_plus: f64,
    sigma_minus: f64,
    time_grid: &TimeGrid,
) -> Result<MinMaxReport> {
    if !(s > 1.0) {
        return Err(invalid("s", format!("must exceed 1, got {s}")));
    }
    let horizon = time_grid.horizon();
    let times = time_grid.times();
    let margins: Vec<f64> = times[1..times.len() - 1]
        .iter()
        .map(|&t| {
            let tau = t * (horizon - t);
            let lhs = -(1.0 + s) * sigma_minus / tau;
            let rhs = -s * sigma_plus / tau;
            rhs - lhs
        })
        .collect();
    let failures = margins.iter().filter(|&&m| !(m > 0.0)).count();
    Ok(MinMaxReport {
        passed: failures == 0,
        margins,
        failures,
    })
}

/// `ℓ(t)`: `T²/4` on the first half of the horizon, `t(T−t)` on the second.
pub fn ell(t: f64, horizon: f64) -> f64 {
    if t <= 0.5 * horizon {
        0.25 * horizon * horizon
    } else {
        t * (horizon - t)
    }
}

/// Weights at every (interior node, time node). Column `j` is time `t_j`.
/// Entries that are infinite at `t = 0` or `t = T` are stored as `+∞`.
#[derive(Debug, Clone)]
pub struct WeightField {
    pub nodes: Vec<f64>,
    pub times: Vec<f64>,
    pub horizon: f64,
    pub sigma: Field,
    pub exp_weight: Field,
    pub alpha: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

pub fn build_weights(
    params: &CarlemanParams,
    grid: &Grid1D,
    time_grid: &TimeGrid,
) -> Result<WeightField> {
    check_len(grid.n_interior(), params.eta0.len())?;
    let n = grid.n_interior();
    let horizon = time_grid.horizon();
    let times = time_grid.times().to_vec();
    let sigma = params.sigma();
    let exp_weight = params.exp_weight();

    let over = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    let mut alpha = DMatrix::zeros(n, times.len());
    let mut xi = DMatrix::zeros(n, times.len());
    let mut beta = DMatrix::zeros(n, times.len());
    let mut gamma = DMatrix::zeros(n, times.len());
    for (j, &t) in times.iter().enumerate() {
        let tau = t * (horizon - t);
        let l = ell(t, horizon);
        for i in 0..n {
            alpha[(i, j)] = over(sigma[i], tau);
            xi[(i, j)] = over(exp_weight[i], tau);
            beta[(i, j)] = over(sigma[i], l);
            gamma[(i, j)] = over(exp_weight[i], l);
        }
    }
    Ok(WeightField {
        nodes: grid.nodes().to_vec(),
        times,
        horizon,
        sigma,
        exp_weight,
        alpha,
        xi,
        beta,
        gamma,
    })
}

/// Discretized Carleman functional on a trajectory.
///
/// The true values are `lhs · e^{log_scale}` and `rhs_local · e^{log_scale}`;
/// the common factor keeps both representable when `e^{−2sα}` underflows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanFunctional {
    pub lhs: f64,
    pub rhs_local: f64,
    pub log_scale: f64,
}

impl CarlemanFunctional {
    /// `𝓘(φ) / (s³λ⁴∬_𝒪 e^{−2sα}ξ³|φ|²)`, the empirical Carleman constant.
    pub fn ratio(&self) -> f64 {
        self.lhs / self.rhs_local
    }
}

/// Evaluates
/// `𝓘(φ) = sλ²∬ e^{−2sα}ξ|∂ₓφ|² + s³λ⁴∬ e^{−2sα}ξ³|φ|²` and the local
/// observation `s³λ⁴∬_{𝒪×(0,T)} e^{−2sα}ξ³|φ|²`.
///
/// Space uses `h·Σ` with centered differences for `∂ₓ`; time uses `dt·Σ`
/// over interior nodes (the weight vanishes at `t = 0, T`).
pub fn carleman_functional(
    traj: &Trajectory,
    weights: &WeightField,
    params: &CarlemanParams,
    grid: &Grid1D,
    window: &ControlWindow,
) -> Result<CarlemanFunctional> {
    let n = grid.n_interior();
    let n_t = weights.times.len();
    check_len(n_t, traj.states.len())?;
    check_len(n, weights.alpha.nrows())?;
    let h = grid.h();
    let dt = weights.horizon / (n_t - 1) as f64;
    let (s, lambda) = (params.s, params.lambda);

    let log_grad = |i: usize, j: usize| -2.0 * s * weights.alpha[(i, j)] + weights.xi[(i, j)].ln();
    let log_zero =
        |i: usize, j: usize| -2.0 * s * weights.alpha[(i, j)] + 3.0 * weights.xi[(i, j)].ln();

    let mut log_scale = f64::NEG_INFINITY;
    for j in 1..n_t - 1 {
        for i in 0..n {
            log_scale = log_scale.max(log_grad(i, j)).max(log_zero(i, j));
        }
    }

    let mask = window.mask(grid);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for j in 1..n_t - 1 {
        let phi = &traj.states[j];
        check_len(n, phi.len())?;
        for i in 0..n {
            let left = if i > 0 { phi[i - 1] } else { 0.0 };
            let right = if i + 1 < n { phi[i + 1] } else { 0.0 };
            let grad = (right - left) / (2.0 * h);
            let w_grad = (log_grad(i, j) - log_scale).exp();
            let w_zero = (log_zero(i, j) - log_scale).exp();
            let zero_term = s.powi(3) * lambda.powi(4) * w_zero * phi[i] * phi[i];
            lhs += s * lambda * lambda * w_grad * grad * grad + zero_term;
            rhs += mask[i] * zero_term;
        }
    }
    Ok(CarlemanFunctional {
        lhs: lhs * h * dt,
        rhs_local: rhs * h * dt,
        log_scale,
    })
}

/// Checks `ξ^{−ν} ≤ (T²/c₀)^ν` with `c₀ = 4·min_x e^{λ(2N+η⁰)}` at every
/// interior grid point.
pub fn xi_bound_check(weights: &WeightField, nu: f64) -> Result<bool> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(invalid("nu", format!("must be positive, got {nu}")));
    }
    let e_min = weights
        .exp_weight
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let log_bound = nu * (2.0 * weights.horizon.ln() - (4.0 * e_min).ln());
    let tol = 1e-12 * (1.0 + log_bound.abs());
    let n_t = weights.times.len();
    for j in 1..n_t - 1 {
        for i in 0..weights.nodes.len() {
            let log_val = -nu * weights.xi[(i, j)].ln();
            if log_val > log_bound + tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
