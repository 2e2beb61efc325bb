//! Nonlocal kernels `K(x,θ,t)`, their quadrature matrices and the
//! admissibility constants 𝒦 and 𝓜.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid1D, TimeGrid};

/// One-dimensional building block for separable kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialProfile {
    Constant {
        value: f64,
    },
    /// `sin(mode·π·x)`
    Sine {
        mode: u32,
    },
    /// Piecewise-linear through `(x, values)`, pinned to zero at 0 and 1.
    Samples {
        x: Vec<f64>,
        values: Vec<f64>,
    },
}

impl SpatialProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            SpatialProfile::Constant { value } => *value,
            SpatialProfile::Sine { mode } => (*mode as f64 * std::f64::consts::PI * x).sin(),
            SpatialProfile::Samples { x: xs, values } => piecewise_linear(xs, values, x),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SpatialProfile::Constant { value } if !value.is_finite() => {
                Err(invalid("kernel", "constant profile must be finite"))
            }
            SpatialProfile::Samples { x, values } => {
                if x.len() != values.len() || x.is_empty() {
                    return Err(invalid(
                        "kernel",
                        "sample profile needs matching, non-empty x/values",
                    ));
                }
                if !x.windows(2).all(|w| w[0] < w[1]) || x[0] < 0.0 || x[x.len() - 1] > 1.0 {
                    return Err(invalid(
                        "kernel",
                        "sample abscissae must increase inside [0, 1]",
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("kernel", "sample values must be finite"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn piecewise_linear(xs: &[f64], values: &[f64], x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let idx = xs.partition_point(|&xi| xi <= x);
    let (x0, v0) = if idx == 0 {
        (0.0, 0.0)
    } else {
        (xs[idx - 1], values[idx - 1])
    };
    let (x1, v1) = if idx == xs.len() {
        (1.0, 0.0)
    } else {
        (xs[idx], values[idx])
    };
    if x1 == x0 {
        return v0;
    }
    v0 + (v1 - v0) * (x - x0) / (x1 - x0)
}

/// A kernel tabulated on a tensor grid `(x, θ, t)`, interpolated trilinearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedKernel {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub t: Vec<f64>,
    /// Flattened `[ix][itheta][it]`.
    pub values: Vec<f64>,
}

impl TabulatedKernel {
    pub fn new(x: Vec<f64>, theta: Vec<f64>, t: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let tab = Self {
            x,
            theta,
            t,
            values,
        };
        tab.validate()?;
        Ok(tab)
    }

    fn validate(&self) -> Result<()> {
        for (name, axis) in [("x", &self.x), ("theta", &self.theta), ("t", &self.t)] {
            if axis.is_empty() || !axis.windows(2).all(|w| w[0] < w[1]) {
                return Err(invalid(
                    "kernel",
                    format!("tabulated axis `{name}` must be non-empty and increasing"),
                ));
            }
        }
        let expected = self.x.len() * self.theta.len() * self.t.len();
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel", "tabulated values must be finite"));
        }
        Ok(())
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.theta.len() + j) * self.t.len() + k]
    }

    pub fn eval(&self, x: f64, theta: f64, t: f64) -> f64 {
        let (i0, i1, wx) = bracket(&self.x, x);
        let (j0, j1, wy) = bracket(&self.theta, theta);
        let (k0, k1, wt) = bracket(&self.t, t);
        let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
        let plane = |k: usize| {
            lerp(
                lerp(self.at(i0, j0, k), self.at(i0, j1, k), wy),
                lerp(self.at(i1, j0, k), self.at(i1, j1, k), wy),
                wx,
            )
        };
        lerp(plane(k0), plane(k1), wt)
    }

    pub fn is_time_independent(&self) -> bool {
        self.t.len() == 1
    }

    /// Reads a CSV with header `x,theta,t,value` covering a full tensor grid.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let expected = ["x", "theta", "t", "value"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(invalid(
                "kernel",
                format!("expected CSV header x,theta,t,value, got {headers:?}"),
            ));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let mut vals = [0.0; 4];
            for (slot, field) in vals.iter_mut().zip(record.iter()) {
                *slot = field
                    .trim()
                    .parse()
                    .map_err(|e| invalid("kernel", format!("bad number `{field}`: {e}")))?;
            }
            rows.push(vals);
        }
        let axis = |c: usize| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let (x, theta, t) = (axis(0), axis(1), axis(2));
        let mut values = vec![f64::NAN; x.len() * theta.len() * t.len()];
        let find = |a: &[f64], v: f64| {
            a.binary_search_by(|p| p.total_cmp(&v))
                .expect("value from axis")
        };
        for r in &rows {
            let idx =
                (find(&x, r[0]) * theta.len() + find(&theta, r[1])) * t.len() + find(&t, r[2]);
            values[idx] = r[3];
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(invalid(
                "kernel",
                "tabulated CSV does not cover a full tensor grid",
            ));
        }
        Self::new(x, theta, t, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "theta", "t", "value"])?;
        for (i, &x) in self.x.iter().enumerate() {
            for (j, &th) in self.theta.iter().enumerate() {
                for (k, &t) in self.t.iter().enumerate() {
                    w.write_record([
                        x.to_string(),
                        th.to_string(),
                        t.to_string(),
                        self.at(i, j, k).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn bracket(axis: &[f64], v: f64) -> (usize, usize, f64) {
    if axis.len() == 1 || v <= axis[0] {
        return (0, 0, 0.0);
    }
    let last = axis.len() - 1;
    if v >= axis[last] {
        return (last, last, 0.0);
    }
    let hi = axis.partition_point(|&a| a <= v);
    let lo = hi - 1;
    (lo, hi, (v - axis[lo]) / (axis[hi] - axis[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelFamily {
    Zero,
    /// `left(x)·right(θ)`
    Separable {
        left: SpatialProfile,
        right: SpatialProfile,
    },
    /// `exp(−(x−θ)²/(2ρ²))`
    GaussianBump {
        rho: f64,
    },
    /// `p(x)·p(θ)`, produced by the counterexample construction.
    Counterexample {
        p: SpatialProfile,
    },
    CustomTabulated {
        table: TabulatedKernel,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeProfile {
    Constant,
    /// `exp(−c·σ⁻/(t(T−t)))`
    CarlemanDecay {
        c: f64,
    },
    /// `exp(−B/(T−t))`
    TerminalDecay {
        b: f64,
    },
}

impl TimeProfile {
    /// Natural log of the time factor; `−∞` where the factor vanishes.
    pub fn log_factor(&self, t: f64, ctx: &KernelContext) -> f64 {
        match *self {
            TimeProfile::Constant => 0.0,
            TimeProfile::CarlemanDecay { c } => {
                let tau = t * (ctx.horizon - t);
                if tau <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -c * ctx.sigma_minus / tau
                }
            }
            TimeProfile::TerminalDecay { b } => {
                let rem = ctx.horizon - t;
                if rem <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -b / rem
                }
            }
        }
    }
}

/// Horizon and `σ⁻` needed to evaluate time profiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelContext {
    pub horizon: f64,
    pub sigma_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "constant_profile")]
    pub time_profile: TimeProfile,
}

fn one() -> f64 {
    1.0
}

fn constant_profile() -> TimeProfile {
    TimeProfile::Constant
}

impl KernelSpec {
    pub fn zero() -> Self {
        Self {
            family: KernelFamily::Zero,
            amplitude: 0.0,
            time_profile: TimeProfile::Constant,
        }
    }

    pub fn new(family: KernelFamily, amplitude: f64, time_profile: TimeProfile) -> Result<Self> {
        let spec = Self {
            family,
            amplitude,
            time_profile,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amplitude.is_finite() {
            return Err(invalid("kernel.amplitude", "must be finite"));
        }
        match self.time_profile {
            TimeProfile::CarlemanDecay { c } if !(c > 0.0 && c.is_finite()) => {
                return Err(invalid(
                    "kernel.time_profile.c",
                    format!("must be positive, got {c}"),
                ))
            }
            TimeProfile::TerminalDecay { b } if !(b > 0.0 && b.is_finite()) => {
                return Err(invalid(
                    "kernel.time_profile.b",
                    format!("must be positive, got {b}"),
                ))
            }
            _ => {}
        }
        match &self.family {
            KernelFamily::Separable { left, right } => {
                left.validate()?;
                right.validate()
            }
            KernelFamily::Counterexample { p } => p.validate(),
            KernelFamily::GaussianBump { rho } if !(*rho > 0.0 && rho.is_finite()) => Err(invalid(
                "kernel.rho",
                format!("must be positive, got {rho}"),
            )),
            KernelFamily::CustomTabulated { table } => table.validate(),
            _ => Ok(()),
        }
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self {
            amplitude,
            ..self.clone()
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, KernelFamily::Zero) || self.amplitude == 0.0
    }

    pub fn is_time_independent(&self) -> bool {
        let spatial = match &self.family {
            KernelFamily::CustomTabulated { table } => table.is_time_independent(),
            _ => true,
        };
        spatial && matches!(self.time_profile, TimeProfile::Constant)
    }

    /// `K(x,θ,t)` without amplitude and time profile.
    pub fn spatial(&self, x: f64, theta: f64, t: f64) -> f64 {
        match &self.family {
            KernelFamily::Zero => 0.0,
            KernelFamily::Separable { left, right } => left.eval(x) * right.eval(theta),
            KernelFamily::GaussianBump { rho } => (-(x - theta).powi(2) / (2.0 * rho * rho)).exp(),
            KernelFamily::Counterexample { p } => p.eval(x) * p.eval(theta),
            KernelFamily::CustomTabulated { table } => table.eval(x, theta, t),
        }
    }

    pub fn eval(&self, x: f64, theta: f64, t: f64, ctx: &KernelContext) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        self.amplitude * self.time_profile.log_factor(t, ctx).exp() * self.spatial(x, theta, t)
    }

    fn spatial_matrix(&self, grid: &Grid1D, t: f64) -> DMatrix<f64> {
        let x = grid.nodes();
        let h = grid.h();
        DMatrix::from_fn(x.len(), x.len(), |i, j| self.spatial(x[i], x[j], t) * h)
    }

    /// `max_x h·Σ_θ |K_spatial(x,θ,t)|`.
    fn max_row_sum(&self, grid: &Grid1D, t: f64) -> f64 {
        let m = self.spatial_matrix(grid, t);
        m.row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Quadrature matrix `[K(x_i, θ_j, t)·h]`, so that applying it to a field
/// approximates `∫_Ω K(x,θ,t)y(θ)dθ` at each node.
pub fn kernel_matrix_at(
    spec: &KernelSpec,
    grid: &Grid1D,
    t: f64,
    ctx: &KernelContext,
) -> DMatrix<f64> {
    let n = grid.n_interior();
    if spec.is_zero() {
        return DMatrix::zeros(n, n);
    }
    let factor = spec.amplitude * spec.time_profile.log_factor(t, ctx).exp();
    spec.spatial_matrix(grid, t) * factor
}

/// Value of an admissibility supremum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Admissibility {
    Finite(f64),
    Infinite,
}

impl Admissibility {
    pub fn is_finite(&self) -> bool {
        matches!(self, Admissibility::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Admissibility::Finite(v) => Some(*v),
            Admissibility::Infinite => None,
        }
    }
}

/// Number of refinement steps applied to the solver time grid before scanning.
pub const ADMISSIBILITY_REFINEMENT: usize = 4;

fn strictly_growing_toward(log_vals: &[f64]) -> bool {
    // log_vals ordered from the endpoint inward
    log_vals.len() == 3 && log_vals[0] > log_vals[1] && log_vals[1] > log_vals[2]
}

/// Shared scan: `|A|·sup_t exp(log_weight(t) + log_factor(t)) · max_x h·Σ|K_spatial|`.
fn weighted_sup(
    spec: &KernelSpec,
    grid: &Grid1D,
    time_grid: &TimeGrid,
    ctx: &KernelContext,
    log_weight: impl Fn(f64) -> f64,
    include_start: bool,
    watch_start: bool,
) -> Admissibility {
    if spec.is_zero() {
        return Admissibility::Finite(0.0);
    }
    let fine = time_grid.refined(ADMISSIBILITY_REFINEMENT);
    let times = fine.times();
    let last = times.len() - 1;
    let static_sum = spec
        .is_time_independent()
        .then(|| spec.max_row_sum(grid, 0.0));

    let first = if include_start { 0 } else { 1 };
    let log_vals: Vec<f64> = times[first..last]
        .iter()
        .map(|&t| {
            let rows = static_sum.unwrap_or_else(|| spec.max_row_sum(grid, t));
            if rows == 0.0 {
                f64::NEG_INFINITY
            } else {
                log_weight(t) + spec.time_profile.log_factor(t, ctx) + rows.ln()
            }
        })
        .collect();
    let at = |j: usize| log_vals[j - first];

    let end_growth = strictly_growing_toward(&[at(last - 1), at(last - 2), at(last - 3)]);
    let start_growth = watch_start && strictly_growing_toward(&[at(1), at(2), at(3)]);
    if end_growth || start_growth {
        return Admissibility::Infinite;
    }
    let peak = log_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Admissibility::Finite(0.0);
    }
    let value = spec.amplitude.abs() * peak.exp();
    if value.is_finite() {
        Admissibility::Finite(value)
    } else {
        Admissibility::Infinite
    }
}

/// `𝒦 = sup exp(σ⁻/(t(T−t)))·∫|K(x,θ,t)|dθ` over the interior of the
/// refined grid. Reports [`Admissibility::Infinite`] when the log of the
/// weighted integral grows strictly over the three nodes nearest either
/// endpoint.
pub fn compute_k_constant(
    spec: &KernelSpec,
    sigma_minus: f64,
    grid: &Grid1D,
    time_grid: &TimeGrid,
) -> Admissibility {
    let horizon = time_grid.horizon();
    let ctx = KernelContext {
        horizon,
        sigma_minus,
    };
    weighted_sup(
        spec,
        grid,
        time_grid,
        &ctx,
        |t| sigma_minus / (t * (horizon - t)),
        false,
        true,
    )
}

/// `𝓜 = sup exp(B/(T−t))·∫|K(x,θ,t)|dθ`; only the terminal endpoint can
/// make it diverge.
pub fn compute_m_constant(
    spec: &KernelSpec,
    b: f64,
    sigma_minus: f64,
    grid: &Grid1D,
    time_grid: &TimeGrid,
) -> Result<Admissibility> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(invalid("B", format!("must be positive, got {b}")));
    }
    let horizon = time_grid.horizon();
    let ctx = KernelContext {
        horizon,
        sigma_minus,
    };
    Ok(weighted_sup(
        spec,
        grid,
        time_grid,
        &ctx,
        |t| b / (horizon - t),
        true,
        false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    fn ctx(horizon: f64) -> KernelContext {
        KernelContext {
            horizon,
            sigma_minus: 1.0,
        }
    }

    fn bump(c: f64) -> KernelSpec {
        KernelSpec::new(
            KernelFamily::GaussianBump { rho: 0.2 },
            1.5,
            TimeProfile::CarlemanDecay { c },
        )
        .unwrap()
    }

    #[test]
    fn zero_kernel_matrix() {
        let g = build_grid(8).unwrap();
        let m = kernel_matrix_at(&KernelSpec::zero(), &g, 0.3, &ctx(1.0));
        assert_eq!(m, DMatrix::zeros(8, 8));
    }

    #[test]
    fn separable_matrix_is_rank_one_quadrature() {
        let g = build_grid(20).unwrap();
        let p = SpatialProfile::Sine { mode: 2 };
        let spec = KernelSpec::new(
            KernelFamily::Separable {
                left: p.clone(),
                right: p.clone(),
            },
            1.0,
            TimeProfile::Constant,
        )
        .unwrap();
        let m = kernel_matrix_at(&spec, &g, 0.1, &ctx(1.0));
        let f = g.sample(|x| x * x);
        let pv = g.sample(|x| p.eval(x));
        let expected = &pv * (g.h() * pv.dot(&f));
        assert!((m * &f - expected).amax() < 1e-14);
    }

    #[test]
    fn carleman_decay_vanishes_at_start() {
        let g = build_grid(8).unwrap();
        let spec = bump(2.0);
        let early = kernel_matrix_at(&spec, &g, 1e-4, &ctx(1.0));
        assert_eq!(early.amax(), 0.0);
        let mid = kernel_matrix_at(&spec, &g, 0.5, &ctx(1.0));
        assert!(mid.amax() > 0.0);
    }

    #[test]
    fn time_profiles_validated() {
        let fam = KernelFamily::GaussianBump { rho: 0.1 };
        assert!(KernelSpec::new(fam.clone(), 1.0, TimeProfile::CarlemanDecay { c: 0.0 }).is_err());
        assert!(KernelSpec::new(fam.clone(), 1.0, TimeProfile::TerminalDecay { b: -1.0 }).is_err());
        assert!(KernelSpec::new(fam.clone(), f64::NAN, TimeProfile::Constant).is_err());
        assert!(KernelSpec::new(
            KernelFamily::GaussianBump { rho: 0.0 },
            1.0,
            TimeProfile::Constant
        )
        .is_err());
    }

    /// Dense scan of exp(σ⁻/τ)·h·Σ|K| on a much finer time grid.
    fn brute_force_k(
        spec: &KernelSpec,
        sigma_minus: f64,
        grid: &Grid1D,
        horizon: f64,
        steps: usize,
    ) -> f64 {
        let ctx = KernelContext {
            horizon,
            sigma_minus,
        };
        let mut best: f64 = 0.0;
        for k in 1..steps {
            let t = horizon * k as f64 / steps as f64;
            let m = kernel_matrix_at(spec, grid, t, &ctx);
            let rows = m
                .row_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            best = best.max((sigma_minus / (t * (horizon - t))).exp() * rows);
        }
        best
    }

    #[test]
    fn k_constant_examples() {
        let g = build_grid(16).unwrap();
        let tg = TimeGrid::new(1.0, 40).unwrap();
        assert_eq!(
            compute_k_constant(&KernelSpec::zero(), 1.0, &g, &tg),
            Admissibility::Finite(0.0)
        );

        let spec = bump(2.0);
        let k = compute_k_constant(&spec, 1.0, &g, &tg).value().unwrap();
        let oracle = brute_force_k(&spec, 1.0, &g, 1.0, 4000);
        assert!(k <= oracle * (1.0 + 1e-9));
        assert!((k - oracle).abs() < 1e-3 * oracle, "{k} vs {oracle}");
        let max_spatial = spec.amplitude * spec.max_row_sum(&g, 0.0);
        assert!(k <= max_spatial * (1.0 + 1e-12));

        let constant = KernelSpec::new(
            KernelFamily::GaussianBump { rho: 0.2 },
            1.0,
            TimeProfile::Constant,
        )
        .unwrap();
        assert_eq!(
            compute_k_constant(&constant, 1.0, &g, &tg),
            Admissibility::Infinite
        );
        assert_eq!(
            compute_k_constant(&bump(0.5), 1.0, &g, &tg),
            Admissibility::Infinite
        );
    }

    #[test]
    fn m_constant_examples() {
        let g = build_grid(16).unwrap();
        let tg = TimeGrid::new(1.0, 40).unwrap();
        let b = 0.7;
        assert_eq!(
            compute_m_constant(&KernelSpec::zero(), b, 1.0, &g, &tg).unwrap(),
            Admissibility::Finite(0.0)
        );
        let decaying = KernelSpec::new(
            KernelFamily::GaussianBump { rho: 0.2 },
            1.0,
            TimeProfile::TerminalDecay { b: 2.0 * b },
        )
        .unwrap();
        let m = compute_m_constant(&decaying, b, 1.0, &g, &tg)
            .unwrap()
            .value()
            .unwrap();
        // oracle: exp(−B/(T−t)) peaks at t = 0 on [0, T)
        let mut oracle: f64 = 0.0;
        for k in 0..20000 {
            let t = k as f64 / 20000.0;
            let rows = decaying.max_row_sum(&g, t);
            oracle = oracle.max((b / (1.0 - t)).exp() * (-2.0 * b / (1.0 - t)).exp() * rows);
        }
        assert!((m - oracle).abs() < 1e-9 * oracle);
        let constant = decaying.clone();
        let constant = KernelSpec {
            time_profile: TimeProfile::Constant,
            ..constant
        };
        assert_eq!(
            compute_m_constant(&constant, b, 1.0, &g, &tg).unwrap(),
            Admissibility::Infinite
        );
        assert!(compute_m_constant(&constant, 0.0, 1.0, &g, &tg).is_err());
    }

    #[test]
    fn k_constant_homogeneous() {
        let g = build_grid(12).unwrap();
        let tg = TimeGrid::new(0.5, 30).unwrap();
        let spec = bump(1.5);
        let k1 = compute_k_constant(&spec, 2.0, &g, &tg).value().unwrap();
        let k2 = compute_k_constant(&spec.with_amplitude(2.0 * spec.amplitude), 2.0, &g, &tg)
            .value()
            .unwrap();
        assert_eq!(k2, 2.0 * k1);
    }

    #[test]
    fn tabulated_round_trip_and_interpolation() {
        let x = vec![0.0, 0.5, 1.0];
        let t = vec![0.0, 1.0];
        let mut values = Vec::new();
        for &xi in &x {
            for &th in &x {
                for &tk in &t {
                    values.push(xi + 2.0 * th + 3.0 * tk);
                }
            }
        }
        let tab = TabulatedKernel::new(x.clone(), x.clone(), t, values).unwrap();
        // trilinear interpolation reproduces affine functions
        assert!((tab.eval(0.3, 0.8, 0.25) - (0.3 + 1.6 + 0.75)).abs() < 1e-14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        tab.write_csv(&path).unwrap();
        assert_eq!(TabulatedKernel::from_csv(&path).unwrap(), tab);
    }

    #[test]
    fn tabulated_incomplete_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        std::fs::write(&path, "x,theta,t,value\n0,0,0,1\n1,0,0,1\n0,1,0,1\n").unwrap();
        assert!(TabulatedKernel::from_csv(&path).is_err());
        std::fs::write(&path, "a,b,c\n0,0,0\n").unwrap();
        assert!(TabulatedKernel::from_csv(&path).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec = bump(2.0);
        let json = serde_json::to_string(&spec).unwrap();
        let back: KernelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let parsed: KernelSpec = serde_json::from_str(r#"{"family":{"kind":"zero"}}"#).unwrap();
        assert!(parsed.is_zero() || parsed.family == KernelFamily::Zero);
        assert!(
            serde_json::from_str::<KernelSpec>(r#"{"family":{"kind":"zero"},"bogus":1}"#).is_err()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn separable_has_numerical_rank_one(
                a in 1u32..6, b in 1u32..6, amp in -5.0f64..5.0, n in 6usize..30
            ) {
                prop_assume!(amp.abs() > 1e-3);
                let g = build_grid(n).unwrap();
                let spec = KernelSpec::new(
                    KernelFamily::Separable {
                        left: SpatialProfile::Sine { mode: a },
                        right: SpatialProfile::Constant { value: 1.0 + b as f64 },
                    },
                    amp,
                    TimeProfile::Constant,
                ).unwrap();
                let m = kernel_matrix_at(&spec, &g, 0.5, &ctx(1.0));
                let sv = m.singular_values();
                let mut sv: Vec<f64> = sv.iter().copied().collect();
                sv.sort_by(|x, y| y.total_cmp(x));
                prop_assert!(sv[1] < 1e-10 * sv[0]);
            }

            #[test]
            fn carleman_decay_classification(c in 0.1f64..6.0, horizon in 0.2f64..2.0) {
                prop_assume!((c - 1.0).abs() > 0.05);
                let g = build_grid(8).unwrap();
                let tg = TimeGrid::new(horizon, 24).unwrap();
                let k = compute_k_constant(&bump(c), 3.0, &g, &tg);
                prop_assert_eq!(k.is_finite(), c > 1.0);
            }

            #[test]
            fn homogeneity(scale in 0.01f64..100.0) {
                let g = build_grid(8).unwrap();
                let tg = TimeGrid::new(1.0, 16).unwrap();
                let spec = bump(2.5);
                let k1 = compute_k_constant(&spec, 1.0, &g, &tg).value().unwrap();
                let k2 = compute_k_constant(&spec.with_amplitude(scale * spec.amplitude), 1.0, &g, &tg).value().unwrap();
                prop_assert!((k2 - scale * k1).abs() <= 1e-12 * k2);
            }
        }
    }
}
