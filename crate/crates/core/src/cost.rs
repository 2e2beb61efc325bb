//! Controllability-cost sweeps over the horizon and the kernel strength.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::grid::{Field, TimeGrid};
use crate::hum::{compute_null_control, HumConfig};
use crate::kernels::{compute_k_constant, TimeProfile};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("fit", "need at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit", "abscissae are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CostSweepResult {
    /// Horizons or amplitudes, in the order given.
    pub parameter_values: Vec<f64>,
    pub costs: Vec<f64>,
    pub terminal_norms: Vec<f64>,
    /// 𝒦 per point, `None` when infinite.
    pub k_constants: Vec<Option<f64>>,
    /// Fit abscissae: `1/T` or `𝒦^{2/3}`.
    pub fit_abscissae: Vec<f64>,
    pub fit_slope: Option<f64>,
    pub fit_r2: Option<f64>,
    pub fit_skipped: bool,
}

impl CostSweepResult {
    fn build(
        parameter_values: Vec<f64>,
        points: Vec<(f64, f64, Option<f64>)>,
        fit_abscissae: Vec<f64>,
    ) -> Result<Self> {
        let costs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let fit = if costs.iter().all(|&c| c > 0.0) {
            let logs: Vec<f64> = costs.iter().map(|c| c.ln()).collect();
            linear_fit(&fit_abscissae, &logs).ok()
        } else {
            None
        };
        Ok(Self {
            parameter_values,
            terminal_norms: points.iter().map(|p| p.1).collect(),
            k_constants: points.iter().map(|p| p.2).collect(),
            costs,
            fit_abscissae,
            fit_slope: fit.map(|f| f.slope),
            fit_r2: fit.map(|f| f.r2),
            fit_skipped: fit.is_none(),
        })
    }

    pub fn write_csv(&self, path: &std::path::Path, parameter: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([parameter, "cost", "terminal_norm", "k_constant"])?;
        for i in 0..self.costs.len() {
            let k = self.k_constants[i].map_or_else(|| "inf".to_string(), |v| v.to_string());
            w.write_record([
                self.parameter_values[i].to_string(),
                self.costs[i].to_string(),
                self.terminal_norms[i].to_string(),
                k,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Null-control cost for each horizon at the template's steps per unit
/// time; fits `log(cost)` against `1/T`.
pub fn sweep_horizon(
    y0: &Field,
    horizons: &[f64],
    template: &Scenario,
    config: &HumConfig,
) -> Result<CostSweepResult> {
    if horizons.len() < 4 {
        return Err(invalid(
            "horizons",
            format!("need at least 4 values, got {}", horizons.len()),
        ));
    }
    if horizons.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(invalid("horizons", "must be positive and finite"));
    }
    let (lo, hi) = horizons
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
    if hi / lo < 8.0 - 1e-12 {
        return Err(invalid(
            "horizons",
            format!("must span a factor of 8, got {}", hi / lo),
        ));
    }
    template.grid.check(y0)?;
    let tg = &template.time_grid;
    let per_unit = tg.m_steps() as f64 / tg.horizon();
    let points = horizons
        .par_iter()
        .map(|&t| {
            let m = ((per_unit * t).round() as usize).max(4);
            let sc = template.with_time_grid(TimeGrid::new(t, m)?);
            let r = compute_null_control(y0, config, &sc)?;
            let k = compute_k_constant(&sc.kernel, sc.sigma_minus, &sc.grid, &sc.time_grid).value();
            Ok((r.cost, r.terminal_norm, k))
        })
        .collect::<Result<Vec<_>>>()?;
    CostSweepResult::build(
        horizons.to_vec(),
        points,
        horizons.iter().map(|t| 1.0 / t).collect(),
    )
}

/// Null-control cost for each kernel amplitude; fits `log(cost)` against
/// `𝒦^{2/3}`. The fit is descriptive only.
pub fn sweep_kernel_strength(
    y0: &Field,
    amplitudes: &[f64],
    scenario: &Scenario,
    config: &HumConfig,
) -> Result<CostSweepResult> {
    if !matches!(
        scenario.kernel.time_profile,
        TimeProfile::CarlemanDecay { .. }
    ) {
        return Err(invalid(
            "kernel.time_profile",
            "strength sweeps need a carleman_decay kernel",
        ));
    }
    let (grid, tg) = (&scenario.grid, &scenario.time_grid);
    if !compute_k_constant(&scenario.kernel, scenario.sigma_minus, grid, tg).is_finite() {
        return Err(invalid(
            "kernel",
            "base kernel is not admissible (𝒦 infinite)",
        ));
    }
    grid.check(y0)?;
    let points = amplitudes
        .par_iter()
        .map(|&a| {
            let sc = scenario.with_kernel(scenario.kernel.with_amplitude(a));
            let r = compute_null_control(y0, config, &sc)?;
            let k = compute_k_constant(&sc.kernel, sc.sigma_minus, grid, tg).value();
            Ok((r.cost, r.terminal_norm, k))
        })
        .collect::<Result<Vec<_>>>()?;
    let abscissae = points
        .iter()
        .map(|p| p.2.unwrap_or(f64::INFINITY).powf(2.0 / 3.0))
        .collect();
    CostSweepResult::build(amplitudes.to_vec(), points, abscissae)
}
