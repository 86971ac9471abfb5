//! Finite-volume radial diffusion in a sphere, implicit Euler in time.
//!
//! Uniform shells `[k dr, (k+1) dr]`, volumes `((k+1)^3 - k^3) dr^3 / 3`
//! (the common `4 pi` dropped). The centre has zero flux by construction and
//! the outward surface flux `q = -D d_r xi(R)` enters only the outer shell,
//! so `sum_k V_k xi_k` changes by exactly `-dt R^2 q` per step.
//!
//! The step matrix depends only on `D`, the grid and `dt`; it is factored
//! once and every step is a forward/backward sweep.

use serde::{Deserialize, Serialize};

/// Radial grid of one particle.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    pub radius: f64,
    pub dr: f64,
    pub volumes: Vec<f64>,
    /// `r^2` at the interior faces `(k + 1) dr`, `k = 0..n-1`.
    pub face_areas: Vec<f64>,
}

impl RadialGrid {
    pub fn new(radius: f64, shells: usize) -> Self {
        let dr = radius / shells as f64;
        let volumes = (0..shells)
            .map(|k| {
                let (a, b) = (k as f64, (k + 1) as f64);
                (b * b * b - a * a * a) * dr * dr * dr / 3.0
            })
            .collect();
        let face_areas = (1..shells)
            .map(|k| {
                let r = k as f64 * dr;
                r * r
            })
            .collect();
        Self {
            radius,
            dr,
            volumes,
            face_areas,
        }
    }

    pub fn shells(&self) -> usize {
        self.volumes.len()
    }

    pub fn surface_area(&self) -> f64 {
        self.radius * self.radius
    }

    /// `R^3 / 3`, the sum of all shell volumes.
    pub fn total_volume(&self) -> f64 {
        self.radius.powi(3) / 3.0
    }

    /// `sum_k V_k xi_k`.
    pub fn content(&self, xi: &[f64]) -> f64 {
        self.volumes.iter().zip(xi).map(|(v, x)| v * x).sum()
    }
}

/// Pre-factored implicit-Euler stepper for one particle.
#[derive(Clone, Debug)]
pub struct ParticleSolver {
    grid: RadialGrid,
    diffusion: f64,
    dt: f64,
    /// Sub-diagonal of the step matrix (`lower[0]` unused).
    lower: Vec<f64>,
    /// Modified super-diagonal of the Thomas elimination.
    upper_mod: Vec<f64>,
    /// Reciprocal pivots.
    inv_pivot: Vec<f64>,
}

impl ParticleSolver {
    pub fn new(radius: f64, shells: usize, diffusion: f64, dt: f64) -> Self {
        let grid = RadialGrid::new(radius, shells);
        let n = grid.shells();
        // Coupling dt * D * A_{k+1/2} / dr between shells k and k+1.
        let coupling: Vec<f64> = grid.face_areas.iter().map(|a| dt * diffusion * a / grid.dr).collect();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for k in 0..n {
            let left = if k > 0 { coupling[k - 1] } else { 0.0 };
            let right = if k + 1 < n { coupling[k] } else { 0.0 };
            diag[k] = grid.volumes[k] + left + right;
            lower[k] = -left;
            upper[k] = -right;
        }
        let mut upper_mod = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev = 0.0;
        for k in 0..n {
            let pivot = diag[k] - lower[k] * prev;
            inv_pivot[k] = 1.0 / pivot;
            upper_mod[k] = upper[k] * inv_pivot[k];
            prev = upper_mod[k];
        }
        Self {
            grid,
            diffusion,
            dt,
            lower,
            upper_mod,
            inv_pivot,
        }
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advance `xi` by one step with outward surface flux `q`, in place.
    /// `scratch` must have the shell count as length.
    ///
    /// The system is solved for the increment rather than the new state, so
    /// rounding scales with the (decaying) change instead of the content and
    /// long zero-flux runs do not drift.
    pub fn step(&self, xi: &mut [f64], q: f64, scratch: &mut [f64]) {
        let n = xi.len();
        debug_assert_eq!(n, self.grid.shells());
        // Face fluxes dt * D * A / dr * (xi_{k+1} - xi_k) recovered from the
        // stored sub-diagonal, which holds minus the left coupling.
        let mut prev = 0.0;
        let mut inflow_left = 0.0;
        for k in 0..n {
            let inflow_right = if k + 1 < n {
                -self.lower[k + 1] * (xi[k + 1] - xi[k])
            } else {
                -self.dt * self.grid.surface_area() * q
            };
            let rhs = inflow_right - inflow_left;
            inflow_left = inflow_right;
            let d = (rhs - self.lower[k] * prev) * self.inv_pivot[k];
            scratch[k] = d;
            prev = d;
        }
        for k in (0..n - 1).rev() {
            scratch[k] -= self.upper_mod[k] * scratch[k + 1];
        }
        for (x, d) in xi.iter_mut().zip(scratch.iter()) {
            *x += d;
        }
    }

    /// Surface value extrapolated from the outer shell centre using the
    /// imposed gradient `-q / D`.
    pub fn surface(&self, xi: &[f64], q: f64) -> f64 {
        xi[xi.len() - 1] - 0.5 * self.grid.dr * q / self.diffusion
    }
}

/// Radial concentration profiles of both particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub cathode: Vec<f64>,
    pub anode: Vec<f64>,
    pub time: f64,
}

impl CellState {
    pub fn uniform(cathode: f64, anode: f64, shells: usize) -> Self {
        Self {
            cathode: vec![cathode; shells],
            anode: vec![anode; shells],
            time: 0.0,
        }
    }
}
