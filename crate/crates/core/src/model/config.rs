//! Fixed (non-estimated) model constants.
//!
//! The Redlich-Kister coefficients, particle radii and the density/capacity
//! scalings of the real cell are not public, so the defaults below are a
//! synthetic set. They are chosen so that
//!
//! * every initial voltage in `[3.3, 4.1]` V is reachable for every admissible
//!   parameter vector (the cathode OCV spans roughly +-1.4 V around `U0`),
//! * both OCV curves are strictly decreasing on the clamp window,
//! * overpotentials at the synthetic truth are tens of millivolts at 8.8 A,
//! * diffusion time constants `R^2/D` fall between 9 s and 1200 s.
//!
//! Only RK orders 0 and 1 are used: for `k >= 2` the expansion has a pole at
//! `xi = 0.5`.

use serde::{Deserialize, Serialize};

/// Faraday constant, C/mol.
pub const FARADAY: f64 = 96485.33212;
/// Universal gas constant, J/(mol K).
pub const GAS_CONSTANT: f64 = 8.314462618;
/// 25 degrees Celsius.
pub const DEFAULT_TEMPERATURE: f64 = 298.15;

/// Constants of one electrode that are not estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeSpec {
    /// Particle radius, in the length unit of the scaled diffusion constant.
    pub radius: f64,
    /// Density `rho_i`; only enters through the Butler-Volmer flux scale.
    pub density: f64,
    /// The product `rho_i * c_{m,i}` scaling the concentration.
    pub density_capacity: f64,
    /// Redlich-Kister coefficients `A_{i,0..=n_i}`.
    pub rk_coefficients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub temperature: f64,
    pub faraday: f64,
    pub gas_constant: f64,
    /// Number of radial finite-volume shells per particle.
    pub shells: usize,
    /// Internal time step, s.
    pub time_step: f64,
    /// Surface concentrations are clamped to `[clamp, 1 - clamp]`.
    pub surface_clamp: f64,
    /// Minimum `|2 xi - 1|` when RK terms of order >= 2 are active.
    pub pole_guard: f64,
    /// Maximum clamp events per simulation; `None` means unlimited.
    pub clamp_budget: Option<usize>,
    /// Grid size for the monotonicity pre-scan of the cathode OCV.
    pub ocv_scan_points: usize,
    pub cathode: ElectrodeSpec,
    pub anode: ElectrodeSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            faraday: FARADAY,
            gas_constant: GAS_CONSTANT,
            shells: 50,
            time_step: 0.1,
            surface_clamp: 1e-6,
            pole_guard: 1e-9,
            clamp_budget: None,
            ocv_scan_points: 512,
            cathode: ElectrodeSpec {
                radius: 0.3,
                density: 2.0e-36,
                density_capacity: 1.2036e-35,
                rk_coefficients: vec![-40.0, 3.0],
            },
            anode: ElectrodeSpec {
                radius: 0.35,
                density: 1.2,
                density_capacity: 24.87,
                rk_coefficients: vec![-3.0, 1.0],
            },
        }
    }
}

impl ModelConfig {
    /// `R theta / F`, the thermal voltage.
    pub fn thermal_voltage(&self) -> f64 {
        self.gas_constant * self.temperature / self.faraday
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |msg: &str| Err(crate::Error::Config(msg.to_string()));
        if self.shells < 2 {
            return bad("model.shells must be at least 2");
        }
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return bad("model.time_step must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("model.temperature must be positive");
        }
        if !(self.surface_clamp > 0.0 && self.surface_clamp < 0.5) {
            return bad("model.surface_clamp must lie in (0, 0.5)");
        }
        if self.ocv_scan_points < 2 {
            return bad("model.ocv_scan_points must be at least 2");
        }
        for (name, e) in [("cathode", &self.cathode), ("anode", &self.anode)] {
            if !(e.radius > 0.0 && e.density > 0.0 && e.density_capacity > 0.0) {
                return Err(crate::Error::Config(format!(
                    "model.{name}: radius, density and density_capacity must be positive"
                )));
            }
        }
        Ok(())
    }
}
