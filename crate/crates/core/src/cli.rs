//! Batch front end: `nhcl <subcommand> --config <path> [--out <dir>]`.
//!
//! Every run writes its artifacts plus `config.resolved.json`, the config
//! with all defaults filled in.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::carleman::{
    build_weights, carleman_functional, check_min_max_inequality, xi_bound_check, CarlemanParams,
};
use crate::cost::{sweep_horizon, sweep_kernel_strength, CostSweepResult};
use crate::counterexample::{
    build_counterexample_with, residual_study, verify_uc_failure, SpectrumModel, UcCheckConfig,
};
use crate::error::{Error, Result};
use crate::fixed_point::{
    semilinear_control_iteration, weighted_control_iteration, FixedPointConfig, FixedPointReport,
    SemilinearSpec,
};
use crate::grid::{ControlWindow, Field, Grid1D, TimeGrid};
use crate::hum::{compute_null_control, estimate_observability_constant, HumConfig};
use crate::kernels::{
    compute_k_constant, compute_m_constant, Admissibility, KernelSpec, SpatialProfile,
};
use crate::scenario::{sigma_minus_for, Scenario};
use crate::solver::{Propagator, SourceTerm, Trajectory};
use crate::svg;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "NHCL_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Forward,
    Control,
    CheckKernel,
    Weights,
    CostSweep,
    Counterexample,
    Semilinear,
    WeightedFixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// `amplitude·sin(mode·π·x)`
    Sine {
        #[serde(default = "one_u32")]
        mode: u32,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude·exp(−(x−center)²/(2·width²))`
    Gaussian {
        center: f64,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Piecewise-linear through the samples, zero at both ends.
    Samples { x: Vec<f64>, values: Vec<f64> },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Sine {
            mode: 1,
            amplitude: 1.0,
        }
    }
}

impl InitialState {
    pub fn sample(&self, grid: &Grid1D) -> Field {
        match self {
            InitialState::Sine { mode, amplitude } => {
                grid.sample(|x| amplitude * (*mode as f64 * PI * x).sin())
            }
            InitialState::Gaussian {
                center,
                width,
                amplitude,
            } => grid.sample(|x| amplitude * (-(x - center).powi(2) / (2.0 * width * width)).exp()),
            InitialState::Samples { x, values } => {
                let p = SpatialProfile::Samples {
                    x: x.clone(),
                    values: values.clone(),
                };
                grid.sample(|v| p.eval(v))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            InitialState::Sine { amplitude, .. } if !amplitude.is_finite() => {
                cfg_err("initial_state.amplitude", "must be finite")
            }
            InitialState::Gaussian { width, .. } if !(*width > 0.0) => {
                cfg_err("initial_state.width", "must be positive")
            }
            InitialState::Gaussian {
                center, amplitude, ..
            } if !(center.is_finite() && amplitude.is_finite()) => {
                cfg_err("initial_state", "center and amplitude must be finite")
            }
            InitialState::Samples { x, values } => {
                if x.len() != values.len() || x.is_empty() {
                    return cfg_err(
                        "initial_state.values",
                        "x and values need equal, non-zero length",
                    );
                }
                if !x.windows(2).all(|w| w[0] < w[1]) || x[0] < 0.0 || x[x.len() - 1] > 1.0 {
                    return cfg_err("initial_state.x", "must increase inside [0, 1]");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanConfig {
    pub lambda: f64,
    pub s: f64,
    /// Exponent in the `ξ^{−ν}` bound check.
    #[serde(default = "one")]
    pub nu: f64,
}

impl Default for CarlemanConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            s: 2.0,
            nu: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservabilityConfig {
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    pub epsilon_reg: f64,
}

fn default_power_iters() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    #[default]
    Horizon,
    Amplitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSweepConfig {
    #[serde(default)]
    pub mode: SweepMode,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
    #[serde(default = "default_amplitudes")]
    pub amplitudes: Vec<f64>,
}

fn default_horizons() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.125]
}

fn default_amplitudes() -> Vec<f64> {
    vec![0.0, -20.0, -40.0, -80.0, -160.0]
}

impl Default for CostSweepConfig {
    fn default() -> Self {
        Self {
            mode: SweepMode::Horizon,
            horizons: default_horizons(),
            amplitudes: default_amplitudes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    #[serde(default = "default_lambda_spec")]
    pub lambda_spec: f64,
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    #[serde(default = "default_mode_study")]
    pub mode_study: Vec<usize>,
    #[serde(default = "default_eps_reg")]
    pub epsilon_reg: Vec<f64>,
    #[serde(default = "default_hum_eps")]
    pub hum_epsilons: Vec<f64>,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
}

fn default_lambda_spec() -> f64 {
    0.5 * PI
}

fn default_n_modes() -> usize {
    128
}

fn default_mode_study() -> Vec<usize> {
    vec![16, 32, 64, 128]
}

fn default_eps_reg() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-6]
}

fn default_hum_eps() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-6, 1e-8]
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            lambda_spec: default_lambda_spec(),
            n_modes: default_n_modes(),
            mode_study: default_mode_study(),
            epsilon_reg: default_eps_reg(),
            hum_epsilons: default_hum_eps(),
            power_iters: default_power_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemilinearConfig {
    #[serde(default = "SemilinearSpec::zero")]
    pub spec: SemilinearSpec,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
}

impl Default for SemilinearConfig {
    fn default() -> Self {
        Self {
            spec: SemilinearSpec::zero(),
            fixed_point: FixedPointConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedConfig {
    /// `𝓑` in the weight `exp(𝓑/(T−t))`.
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
}

impl Default for WeightedConfig {
    fn default() -> Self {
        Self {
            b: 1.0,
            fixed_point: FixedPointConfig::default(),
        }
    }
}

fn default_hum() -> HumConfig {
    HumConfig {
        epsilon: 1e-6,
        cg_tol: 1e-12,
        cg_max_iter: 2000,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_interior: usize,
    pub m_steps: usize,
    pub horizon: f64,
    pub window: ControlWindow,
    #[serde(default = "KernelSpec::zero")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub carleman: CarlemanConfig,
    #[serde(default = "default_hum")]
    pub hum: HumConfig,
    #[serde(default)]
    pub initial_state: InitialState,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub svg: bool,
    #[serde(default)]
    pub observability: Option<ObservabilityConfig>,
    #[serde(default)]
    pub cost_sweep: CostSweepConfig,
    #[serde(default)]
    pub counterexample: CounterexampleConfig,
    #[serde(default)]
    pub semilinear: SemilinearConfig,
    #[serde(default)]
    pub weighted: WeightedConfig,
}

fn cfg_err<T>(path: &str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        path: path.to_string(),
        reason: reason.into(),
    })
}

/// Re-labels a module validation error with the config field it came from.
fn at<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidParameter { name, reason } => Error::Config {
            path: if name.contains('.') {
                name.to_string()
            } else {
                format!("{path}.{name}")
            },
            reason,
        },
        other => Error::Config {
            path: path.to_string(),
            reason: other.to_string(),
        },
    })
}

impl ScenarioConfig {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks every module precondition that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        let grid = at("n_interior", Grid1D::new(self.n_interior))?;
        at("horizon", TimeGrid::new(self.horizon, self.m_steps))?;
        let window = at("window", ControlWindow::new(self.window.a, self.window.b))?;
        at("window", window.validate_for(&grid))?;
        at("kernel", self.kernel.validate())?;
        at(
            "carleman",
            CarlemanParams::for_window(self.carleman.lambda, self.carleman.s, &grid, &window),
        )?;
        if !(self.carleman.nu > 0.0) {
            return cfg_err("carleman.nu", "must be positive");
        }
        at("hum", self.hum.validate())?;
        self.initial_state.validate()?;
        if let Some(obs) = &self.observability {
            if obs.power_iters < 10 {
                return cfg_err("observability.power_iters", "need at least 10");
            }
            if !(obs.epsilon_reg > 0.0) {
                return cfg_err("observability.epsilon_reg", "must be positive");
            }
        }
        let cs = &self.cost_sweep;
        if cs.horizons.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return cfg_err("cost_sweep.horizons", "must be positive and finite");
        }
        if cs.amplitudes.iter().any(|a| !a.is_finite()) {
            return cfg_err("cost_sweep.amplitudes", "must be finite");
        }
        let ce = &self.counterexample;
        if !(ce.lambda_spec > 0.0 && ce.lambda_spec < PI) {
            return cfg_err("counterexample.lambda_spec", "must lie in (0, π)");
        }
        if ce.n_modes < 16 || ce.mode_study.iter().any(|&m| m < 16) {
            return cfg_err("counterexample.n_modes", "need at least 16 modes");
        }
        if ce
            .epsilon_reg
            .iter()
            .chain(&ce.hum_epsilons)
            .any(|&e| !(e > 0.0))
        {
            return cfg_err(
                "counterexample.epsilon_reg",
                "regularizations must be positive",
            );
        }
        if ce.power_iters < 10 {
            return cfg_err("counterexample.power_iters", "need at least 10");
        }
        at("semilinear", self.semilinear.spec.validate())?;
        at("semilinear", self.semilinear.fixed_point.validate())?;
        at("weighted", self.weighted.fixed_point.validate())?;
        if !(self.weighted.b > 0.0 && self.weighted.b.is_finite()) {
            return cfg_err("weighted.b", "must be positive");
        }
        Ok(())
    }

    pub fn sigma_minus(&self) -> f64 {
        sigma_minus_for(self.carleman.lambda)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::new(
            Grid1D::new(self.n_interior)?,
            TimeGrid::new(self.horizon, self.m_steps)?,
            self.window,
            self.kernel.clone(),
            self.sigma_minus(),
        )
    }

    pub fn carleman_params(&self, scenario: &Scenario) -> Result<CarlemanParams> {
        CarlemanParams::for_window(
            self.carleman.lambda,
            self.carleman.s,
            &scenario.grid,
            &scenario.window,
        )
    }
}

/// Output directory: `--out` (or the environment variable), then the
/// config's `output_dir`, then `nhcl-out`.
pub fn resolve_out_dir(cli_out: Option<PathBuf>, config: &ScenarioConfig) -> PathBuf {
    cli_out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nhcl-out"))
}

struct Writer {
    dir: PathBuf,
    svg: bool,
    written: Vec<PathBuf>,
}

impl Writer {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let p = self.path(name);
        fs::write(p, text)?;
        Ok(())
    }

    fn text(&mut self, name: &str, text: String) -> Result<()> {
        let p = self.path(name);
        fs::write(p, text)?;
        Ok(())
    }

    fn svg(&mut self, name: &str, text: impl FnOnce() -> String) -> Result<()> {
        if self.svg {
            self.text(name, text())?;
        }
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<f64>>,
    ) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// `x,t,value` rows; `fields[j]` lives at `times[j]`.
    fn space_time(
        &mut self,
        name: &str,
        grid: &Grid1D,
        times: &[f64],
        fields: &[Field],
    ) -> Result<()> {
        let rows = times.iter().zip(fields).flat_map(|(&t, f)| {
            grid.nodes()
                .iter()
                .zip(f.iter())
                .map(move |(&x, &v)| vec![x, t, v])
        });
        self.csv(name, &["x", "t", "value"], rows)
    }
}

fn heatmap_rows(fields: &[Field]) -> Vec<Vec<f64>> {
    fields.iter().map(|f| f.iter().copied().collect()).collect()
}

fn admissibility_json(a: Admissibility) -> serde_json::Value {
    match a {
        Admissibility::Finite(v) => serde_json::json!({ "finite": true, "value": v }),
        Admissibility::Infinite => serde_json::json!({ "finite": false, "value": null }),
    }
}

/// Runs one experiment and returns the files written.
pub fn run(command: Command, config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut w = Writer {
        dir: out_dir.to_path_buf(),
        svg: config.svg,
        written: Vec::new(),
    };
    w.json("config.resolved.json", config)?;
    let sc = config.scenario()?;
    let y0 = config.initial_state.sample(&sc.grid);
    match command {
        Command::Forward => forward(&mut w, &sc, &y0)?,
        Command::Control => control(&mut w, config, &sc, &y0)?,
        Command::CheckKernel => check_kernel(&mut w, config, &sc)?,
        Command::Weights => weights(&mut w, config, &sc, &y0)?,
        Command::CostSweep => cost_sweep(&mut w, config, &sc, &y0)?,
        Command::Counterexample => counterexample(&mut w, config, &sc)?,
        Command::Semilinear => semilinear(&mut w, config, &sc, &y0)?,
        Command::WeightedFixedPoint => weighted(&mut w, config, &sc, &y0)?,
    }
    Ok(w.written)
}

fn forward(w: &mut Writer, sc: &Scenario, y0: &Field) -> Result<()> {
    let prop = Propagator::new(&sc.grid, &sc.time_grid, &sc.dynamics())?;
    let traj = prop.forward(y0, &SourceTerm::Zero)?;
    let dt = sc.time_grid.dt();
    w.space_time(
        "trajectory.csv",
        &sc.grid,
        sc.time_grid.times(),
        &traj.states,
    )?;
    w.json(
        "forward.json",
        &serde_json::json!({
            "initial_norm": sc.grid.norm(y0),
            "terminal_norm": sc.grid.norm(traj.terminal()),
            "space_time_norm": traj.space_time_norm(&sc.grid, dt),
        }),
    )?;
    w.svg("trajectory.svg", || {
        svg::heatmap("forward trajectory", &heatmap_rows(&traj.states))
    })
}

fn control_rows(sc: &Scenario, control: &[Field]) -> Vec<Field> {
    let mut rows = vec![sc.grid.zeros()];
    rows.extend(control.iter().cloned());
    rows
}

fn control(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario, y0: &Field) -> Result<()> {
    let mut result = compute_null_control(y0, &config.hum, sc)?;
    if let Some(obs) = &config.observability {
        let est =
            estimate_observability_constant(sc, obs.power_iters, obs.epsilon_reg, config.seed)?;
        if !est.converged {
            result
                .warnings
                .push("observability power iteration did not converge".to_string());
        }
        result.observability_estimate = Some(est.value);
    }
    w.json("hum.json", &result.summary(&sc.grid))?;
    // control[k−1] acts on the step ending at t_k; t_0 carries zeros
    w.space_time(
        "control.csv",
        &sc.grid,
        sc.time_grid.times(),
        &control_rows(sc, &result.control),
    )?;
    w.space_time(
        "trajectory.csv",
        &sc.grid,
        sc.time_grid.times(),
        &result.controlled.states,
    )?;
    let iters: Vec<f64> = (0..result.residual_history.len())
        .map(|i| i as f64)
        .collect();
    w.csv(
        "residuals.csv",
        &["iteration", "relative_residual"],
        iters
            .iter()
            .zip(&result.residual_history)
            .map(|(i, r)| vec![*i, *r]),
    )?;
    w.svg("trajectory.svg", || {
        svg::heatmap(
            "controlled trajectory",
            &heatmap_rows(&result.controlled.states),
        )
    })?;
    w.svg("residuals.svg", || {
        svg::line_plot(
            "CG residual history",
            "iteration",
            "relative residual",
            &[svg::Series {
                label: "‖r‖/‖b‖",
                x: &iters,
                y: &result.residual_history,
            }],
            false,
            true,
        )
    })
}

fn check_kernel(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario) -> Result<()> {
    let k = compute_k_constant(&sc.kernel, sc.sigma_minus, &sc.grid, &sc.time_grid);
    let m = compute_m_constant(
        &sc.kernel,
        config.weighted.b,
        sc.sigma_minus,
        &sc.grid,
        &sc.time_grid,
    )?;
    let verdict = if k.is_finite() {
        "hypothesis (ℋ) satisfied: 𝒦 finite"
    } else {
        "hypothesis (ℋ) violated: 𝒦 infinite"
    };
    w.json(
        "kernel.json",
        &serde_json::json!({
            "k_constant": admissibility_json(k),
            "m_constant": admissibility_json(m),
            "b": config.weighted.b,
            "sigma_minus": sc.sigma_minus,
            "verdict": verdict,
        }),
    )
}

fn weights(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario, y0: &Field) -> Result<()> {
    let params = config.carleman_params(sc)?;
    let wf = build_weights(&params, &sc.grid, &sc.time_grid)?;
    let min_max = check_min_max_inequality(&params, &sc.time_grid)?;
    let xi_ok = xi_bound_check(&wf, config.carleman.nu)?;
    let adjoint = Propagator::new(&sc.grid, &sc.time_grid, &sc.dynamics())?.adjoint(y0)?;
    let functional = carleman_functional(&adjoint, &wf, &params, &sc.grid, &sc.window)?;
    let times = sc.time_grid.times();
    let rows = (0..times.len()).flat_map(|j| {
        let wf = &wf;
        (0..sc.grid.n_interior()).map(move |i| {
            vec![
                wf.nodes[i],
                times[j],
                wf.alpha[(i, j)],
                wf.xi[(i, j)],
                wf.beta[(i, j)],
                wf.gamma[(i, j)],
            ]
        })
    });
    w.csv(
        "weights.csv",
        &["x", "t", "alpha", "xi", "beta", "gamma"],
        rows,
    )?;
    w.json(
        "weights.json",
        &serde_json::json!({
            "lambda": params.lambda,
            "s": params.s,
            "f_lambda": params.f_lambda(),
            "sigma_plus": params.sigma_plus,
            "sigma_minus": params.sigma_minus,
            "min_max": min_max,
            "xi_bound_holds": xi_ok,
            "carleman_functional": {
                "lhs": functional.lhs,
                "rhs_local": functional.rhs_local,
                "log_scale": functional.log_scale,
                "ratio": functional.ratio(),
            },
        }),
    )
}

fn cost_sweep(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario, y0: &Field) -> Result<()> {
    let cs = &config.cost_sweep;
    let (result, label, log_x): (CostSweepResult, &str, bool) = match cs.mode {
        SweepMode::Horizon => (sweep_horizon(y0, &cs.horizons, sc, &config.hum)?, "T", true),
        SweepMode::Amplitude => (
            sweep_kernel_strength(y0, &cs.amplitudes, sc, &config.hum)?,
            "amplitude",
            false,
        ),
    };
    let p = w.path("cost_sweep.csv");
    result.write_csv(&p, label)?;
    w.json("cost_sweep.json", &result)?;
    w.svg("cost_sweep.svg", || {
        svg::line_plot(
            "control cost",
            label,
            "cost",
            &[svg::Series {
                label: "cost",
                x: &result.parameter_values,
                y: &result.costs,
            }],
            log_x,
            true,
        )
    })
}

fn counterexample(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario) -> Result<()> {
    let ce = &config.counterexample;
    let (a, b) = (sc.window.a, sc.window.b);
    let grid = &sc.grid;
    let continuum = build_counterexample_with(
        a,
        b,
        ce.lambda_spec,
        ce.n_modes,
        grid,
        SpectrumModel::Continuum,
    )?;
    let discrete = build_counterexample_with(
        a,
        b,
        ce.lambda_spec,
        ce.n_modes,
        grid,
        SpectrumModel::GridConsistent,
    )?;
    let study = residual_study(a, b, ce.lambda_spec, &ce.mode_study, grid)?;
    let check = UcCheckConfig {
        epsilon_reg: ce.epsilon_reg.clone(),
        hum_epsilons: ce.hum_epsilons.clone(),
        power_iters: ce.power_iters,
        seed: config.seed,
    };
    let report = verify_uc_failure(&discrete, grid, &sc.time_grid, &check)?;
    let p = w.path("profiles.csv");
    continuum.write_profiles_csv(grid, &p)?;
    let p = w.path("kernel.csv");
    discrete.tabulated_kernel(grid)?.write_csv(&p)?;
    w.csv(
        "residual_study.csv",
        &["n_modes", "relative_residual"],
        study.iter().map(|(n, r)| vec![*n as f64, *r]),
    )?;
    w.csv(
        "observability.csv",
        &["epsilon_reg", "estimate"],
        report
            .observability
            .iter()
            .map(|r| vec![r.epsilon_reg, r.estimate]),
    )?;
    w.csv(
        "hum_stall.csv",
        &["epsilon", "relative_terminal_norm"],
        report
            .hum_stall
            .iter()
            .map(|r| vec![r.epsilon, r.relative_terminal_norm]),
    )?;
    w.json(
        "counterexample.json",
        &serde_json::json!({
            "a": a,
            "b": b,
            "lambda_spec": ce.lambda_spec,
            "n_modes": ce.n_modes,
            "normalization_value": continuum.normalization_value,
            "series_normalization": continuum.series_normalization,
            "eigen_residual": continuum.eigen_residual(grid)?,
            "grid_consistent": {
                "normalization_value": discrete.normalization_value,
                "eigen_residual": discrete.eigen_residual(grid)?,
            },
            "residual_study": study.iter().map(|(n, r)| serde_json::json!({"n_modes": n, "relative_residual": r})).collect::<Vec<_>>(),
            "verification": report,
        }),
    )?;
    let x = grid.nodes();
    let u: Vec<f64> = continuum.u.iter().copied().collect();
    let p: Vec<f64> = continuum.p.iter().copied().collect();
    w.svg("profiles.svg", || {
        svg::line_plot(
            "counterexample profiles",
            "x",
            "value",
            &[
                svg::Series {
                    label: "u",
                    x,
                    y: &u,
                },
                svg::Series {
                    label: "p",
                    x,
                    y: &p,
                },
            ],
            false,
            false,
        )
    })
}

fn fixed_point_outputs(w: &mut Writer, sc: &Scenario, report: &FixedPointReport) -> Result<()> {
    w.json("fixed_point.json", report)?;
    w.space_time(
        "control.csv",
        &sc.grid,
        sc.time_grid.times(),
        &control_rows(sc, &report.control),
    )?;
    let iters: Vec<f64> = (1..=report.update_norms.len()).map(|i| i as f64).collect();
    w.svg("update_norms.svg", || {
        svg::line_plot(
            "fixed-point updates",
            "iteration",
            "update norm",
            &[svg::Series {
                label: "‖η_{k+1}−η_k‖",
                x: &iters,
                y: &report.update_norms,
            }],
            false,
            true,
        )
    })
}

fn semilinear(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario, y0: &Field) -> Result<()> {
    let report = semilinear_control_iteration(
        y0,
        &config.semilinear.spec,
        sc,
        &config.hum,
        &config.semilinear.fixed_point,
    )?;
    let linear = compute_null_control(y0, &config.hum, sc)?;
    fixed_point_outputs(w, sc, &report)?;
    w.json(
        "linear_baseline.json",
        &serde_json::json!({ "terminal_norm": linear.terminal_norm, "cost": linear.cost }),
    )?;
    if let Some(traj) = &report.trajectory {
        write_trajectory(w, sc, traj)?;
    }
    Ok(())
}

fn weighted(w: &mut Writer, config: &ScenarioConfig, sc: &Scenario, y0: &Field) -> Result<()> {
    let params = config.carleman_params(sc)?;
    let report = weighted_control_iteration(
        y0,
        sc,
        config.weighted.b,
        &params,
        &config.hum,
        &config.weighted.fixed_point,
    )?;
    fixed_point_outputs(w, sc, &report)?;
    if let Some(traj) = &report.trajectory {
        write_trajectory(w, sc, traj)?;
    }
    Ok(())
}

fn write_trajectory(w: &mut Writer, sc: &Scenario, traj: &Trajectory) -> Result<()> {
    w.space_time(
        "trajectory.csv",
        &sc.grid,
        sc.time_grid.times(),
        &traj.states,
    )
}
