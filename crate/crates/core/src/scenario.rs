use crate::error::Result;
use crate::grid::{ControlWindow, Field, Grid1D, TimeGrid};
use crate::kernels::{KernelContext, KernelSpec};
use crate::solver::Dynamics;

/// `σ⁻ = e^{4λN} − e^{3λN}` for `N = ‖η⁰‖∞ = 1`.
pub fn sigma_minus_for(lambda: f64) -> f64 {
    (3.0 * lambda).exp() * lambda.exp_m1()
}

/// Grids, control window and kernel of one control problem.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: Grid1D,
    pub time_grid: TimeGrid,
    pub window: ControlWindow,
    pub kernel: KernelSpec,
    /// Fixes the time scale of `carleman_decay` kernels and of 𝒦.
    pub sigma_minus: f64,
}

impl Scenario {
    pub fn new(
        grid: Grid1D,
        time_grid: TimeGrid,
        window: ControlWindow,
        kernel: KernelSpec,
        sigma_minus: f64,
    ) -> Result<Self> {
        window.validate_for(&grid)?;
        kernel.validate()?;
        Ok(Self {
            grid,
            time_grid,
            window,
            kernel,
            sigma_minus,
        })
    }

    /// Pure heat scenario on `n` interior nodes, `m` steps, horizon `T`.
    pub fn heat(n: usize, m: usize, horizon: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(
            Grid1D::new(n)?,
            TimeGrid::new(horizon, m)?,
            ControlWindow::new(a, b)?,
            KernelSpec::zero(),
            sigma_minus_for(1.0),
        )
    }

    pub fn with_kernel(&self, kernel: KernelSpec) -> Self {
        Self {
            kernel,
            ..self.clone()
        }
    }

    pub fn with_time_grid(&self, time_grid: TimeGrid) -> Self {
        Self {
            time_grid,
            ..self.clone()
        }
    }

    pub fn ctx(&self) -> KernelContext {
        KernelContext {
            horizon: self.time_grid.horizon(),
            sigma_minus: self.sigma_minus,
        }
    }

    pub fn dynamics(&self) -> Dynamics<'_> {
        Dynamics::new(&self.kernel, self.ctx())
    }

    pub fn mask(&self) -> Field {
        self.window.mask(&self.grid)
    }
}
