//! Uniform grids on Ω = (0,1) × [0,T] with homogeneous Dirichlet boundary.
//!
//! Only interior nodes are stored. Boundary values are identically zero, so
//! the 3-point Laplacian and the `h·Σ` pairing are exact transposes of each
//! other.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};

/// Values at the interior nodes of a [`Grid1D`].
pub type Field = DVector<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    n_interior: usize,
    h: f64,
    nodes: Vec<f64>,
}

impl Grid1D {
    pub fn new(n_interior: usize) -> Result<Self> {
        if n_interior < 3 {
            return Err(invalid(
                "n_interior",
                format!("need at least 3 interior nodes, got {n_interior}"),
            ));
        }
        let h = 1.0 / (n_interior as f64 + 1.0);
        let nodes = (1..=n_interior).map(|i| i as f64 * h).collect();
        Ok(Self {
            n_interior,
            h,
            nodes,
        })
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Samples `f` at the interior nodes.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Field {
        DVector::from_iterator(self.n_interior, self.nodes.iter().map(|&x| f(x)))
    }

    pub fn zeros(&self) -> Field {
        DVector::zeros(self.n_interior)
    }

    pub fn check(&self, f: &Field) -> Result<()> {
        check_len(self.n_interior, f.len())
    }

    /// Dense matrix of the discrete operator `−Δ_h`.
    pub fn neg_laplacian_matrix(&self) -> DMatrix<f64> {
        let n = self.n_interior;
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = 2.0 * inv_h2;
            if i > 0 {
                a[(i, i - 1)] = -inv_h2;
            }
            if i + 1 < n {
                a[(i, i + 1)] = -inv_h2;
            }
        }
        a
    }

    /// Discrete `L²(Ω)` norm.
    pub fn norm(&self, f: &Field) -> f64 {
        (self.h * f.dot(f)).sqrt()
    }
}

/// Builds the uniform grid with `n_interior` interior nodes.
pub fn build_grid(n_interior: usize) -> Result<Grid1D> {
    Grid1D::new(n_interior)
}

/// Three-point second difference with zero Dirichlet ghost values.
pub fn apply_laplacian(grid: &Grid1D, f: &Field) -> Result<Field> {
    grid.check(f)?;
    let n = grid.n_interior();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let left = if i > 0 { f[i - 1] } else { 0.0 };
        let right = if i + 1 < n { f[i + 1] } else { 0.0 };
        out[i] = (left - 2.0 * f[i] + right) * inv_h2;
    }
    Ok(out)
}

/// `h · Σ f_i g_i`.
pub fn inner_product(grid: &Grid1D, f: &Field, g: &Field) -> Result<f64> {
    grid.check(f)?;
    grid.check(g)?;
    Ok(grid.h() * f.dot(g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    m_steps: usize,
    dt: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, m_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(
                "T",
                format!("horizon must be positive, got {horizon}"),
            ));
        }
        if m_steps == 0 {
            return Err(invalid("m_steps", "need at least one time step"));
        }
        let dt = horizon / m_steps as f64;
        let mut times: Vec<f64> = (0..=m_steps).map(|k| k as f64 * dt).collect();
        times[m_steps] = horizon;
        Ok(Self {
            horizon,
            m_steps,
            dt,
            times,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn m_steps(&self) -> usize {
        self.m_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self::new(self.horizon, self.m_steps * factor.max(1)).expect("refining a valid time grid")
    }
}

/// The control set 𝒪 = (a, b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlWindow {
    pub a: f64,
    pub b: f64,
}

impl ControlWindow {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(0.0 < a && a < b && b < 1.0) {
            return Err(invalid(
                "window",
                format!("need 0 < a < b < 1, got ({a}, {b})"),
            ));
        }
        Ok(Self { a, b })
    }

    /// Like [`ControlWindow::new`], additionally requiring a grid node inside.
    pub fn on_grid(a: f64, b: f64, grid: &Grid1D) -> Result<Self> {
        let w = Self::new(a, b)?;
        w.validate_for(grid)?;
        Ok(w)
    }

    pub fn validate_for(&self, grid: &Grid1D) -> Result<()> {
        if grid.nodes().iter().any(|&x| self.contains(x)) {
            Ok(())
        } else {
            Err(invalid(
                "window",
                format!(
                    "no grid node inside ({}, {}) at h = {}",
                    self.a,
                    self.b,
                    grid.h()
                ),
            ))
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.a < x && x < self.b
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    /// Indicator 1_𝒪 sampled at the grid nodes.
    pub fn mask(&self, grid: &Grid1D) -> Field {
        grid.sample(|x| if self.contains(x) { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn three_node_grid() {
        let g = build_grid(3).unwrap();
        assert_eq!(g.nodes(), &[0.25, 0.5, 0.75]);
        assert_eq!(g.h(), 0.25);
        assert!((build_grid(4).unwrap().h() - 0.2).abs() < 1e-15);
        assert!(build_grid(2).is_err());
    }

    #[test]
    fn nodes_strictly_increasing_inside_unit_interval() {
        for n in [3, 7, 64, 511] {
            let g = build_grid(n).unwrap();
            assert!((g.h() * (n as f64 + 1.0) - 1.0).abs() < 1e-14);
            assert!(g.nodes().windows(2).all(|w| w[0] < w[1]));
            assert!(g.nodes()[0] > 0.0 && *g.nodes().last().unwrap() < 1.0);
        }
    }

    #[test]
    fn laplacian_exact_on_quadratics() {
        let g = build_grid(17).unwrap();
        let f = g.sample(|x| x * (1.0 - x));
        let lap = apply_laplacian(&g, &f).unwrap();
        for v in lap.iter() {
            assert!((v + 2.0).abs() < 1e-10, "{v}");
        }
        assert_eq!(apply_laplacian(&g, &g.zeros()).unwrap(), g.zeros());
    }

    fn sine_error(n: usize) -> f64 {
        let g = build_grid(n).unwrap();
        let f = g.sample(|x| (PI * x).sin());
        let lap = apply_laplacian(&g, &f).unwrap();
        lap.iter()
            .zip(g.nodes())
            .map(|(v, &x)| (v + PI * PI * (PI * x).sin()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn laplacian_second_order_on_sine() {
        let coarse = sine_error(31);
        let fine = sine_error(63);
        // Taylor bound: h²/12 · π⁴
        assert!(coarse < PI.powi(4) / 12.0 / 32.0f64.powi(2) * 1.01);
        let ratio = coarse / fine;
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn inner_product_examples() {
        let g = build_grid(3).unwrap();
        let one = g.sample(|_| 1.0);
        assert_eq!(inner_product(&g, &one, &one).unwrap(), 0.75);
        assert_eq!(inner_product(&g, &g.zeros(), &one).unwrap(), 0.0);

        let g = build_grid(40).unwrap();
        let s1 = g.sample(|x| (PI * x).sin());
        let s2 = g.sample(|x| (2.0 * PI * x).sin());
        assert!(inner_product(&g, &s1, &s2).unwrap().abs() < 1e-14);
        // discrete orthonormality of √2 sin(kπx)
        let n1 = inner_product(&g, &s1, &s1).unwrap();
        assert!((n1 - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let g = build_grid(5).unwrap();
        let f = DVector::zeros(4);
        assert!(apply_laplacian(&g, &f).is_err());
        assert!(inner_product(&g, &f, &g.zeros()).is_err());
    }

    #[test]
    fn time_grid_endpoints_exact() {
        let tg = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(tg.times()[0], 0.0);
        assert_eq!(tg.times()[7], 0.3);
        assert!(tg.dt() > 0.0);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn window_validation() {
        let g = build_grid(3).unwrap();
        assert!(ControlWindow::new(0.6, 0.4).is_err());
        assert!(ControlWindow::new(0.0, 0.4).is_err());
        assert!(ControlWindow::on_grid(0.3, 0.4, &g).is_err());
        let w = ControlWindow::on_grid(0.4, 0.6, &g).unwrap();
        assert_eq!(w.mask(&g).as_slice(), &[0.0, 1.0, 0.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, n)
        }

        proptest! {
            #[test]
            fn laplacian_symmetric_and_nonpositive(
                (f, g) in (3usize..40).prop_flat_map(|n| (field(n), field(n)))
            ) {
                let grid = build_grid(f.len()).unwrap();
                let f = DVector::from_vec(f);
                let g = DVector::from_vec(g);
                let lf = apply_laplacian(&grid, &f).unwrap();
                let lg = apply_laplacian(&grid, &g).unwrap();
                let a = inner_product(&grid, &lf, &g).unwrap();
                let b = inner_product(&grid, &f, &lg).unwrap();
                let scale = 1.0 + a.abs().max(b.abs());
                prop_assert!((a - b).abs() <= 1e-12 * scale);
                prop_assert!(inner_product(&grid, &lf, &f).unwrap() <= 1e-9 * scale);
            }
        }
    }
}
