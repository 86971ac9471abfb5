//! Physical parameters, the nine-dimensional scaled vector and its box.

use serde::{Deserialize, Serialize};

use super::config::{ElectrodeSpec, ModelConfig};
use crate::{Error, Result};

/// Number of estimated parameters.
pub const PARAMETER_COUNT: usize = 9;

/// Physical bounds of the nine estimated quantities, in the order
/// `D_C, D_A, xi_A0, R_I, m_C, m_A, k~_C, k~_A, U0`.
pub const PHYSICAL_LOWER: [f64; PARAMETER_COUNT] = [1e-4, 1e-4, 0.007, 0.003, 0.01, 0.006, -20.0, -23.0, 3.0];
pub const PHYSICAL_UPPER: [f64; PARAMETER_COUNT] = [1e-2, 1e-2, 0.2, 0.07, 0.052, 0.034, -1.0, 10.0, 4.0];

/// Box of the scaled parameters, as tabulated.
pub const SCALED_LOWER: [f64; PARAMETER_COUNT] = [
    0.0,
    0.0,
    0.0676328502415459,
    0.0821917808219178,
    0.32258064516129,
    0.3,
    -9.5,
    -3.0,
    0.857142857142857,
];
pub const SCALED_UPPER: [f64; PARAMETER_COUNT] = [
    2.0,
    2.0,
    1.93236714975845,
    1.91780821917808,
    1.67741935483871,
    1.7,
    9.5,
    11.0,
    1.14285714285714,
];

pub const PARAMETER_NAMES: [&str; PARAMETER_COUNT] = ["D_C", "D_A", "xi_A0", "R_I", "m_C", "m_A", "k_C", "k_A", "U0"];

fn midpoint(i: usize) -> f64 {
    0.5 * (PHYSICAL_LOWER[i] + PHYSICAL_UPPER[i])
}

/// Shift applied to `k~_C`: the midpoint of its own physical range.
pub const CATHODE_RATE_SHIFT: f64 = -10.5;

/// Per-electrode constants as seen by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeConstants {
    pub radius: f64,
    pub density: f64,
    pub density_capacity: f64,
    pub mass: f64,
    pub diffusion: f64,
    pub log_rate: f64,
    pub rk_coefficients: Vec<f64>,
    pub ocv_offset: f64,
}

impl ElectrodeConstants {
    fn from_spec(spec: &ElectrodeSpec, mass: f64, diffusion: f64, log_rate: f64, ocv_offset: f64) -> Self {
        Self {
            radius: spec.radius,
            density: spec.density,
            density_capacity: spec.density_capacity,
            mass,
            diffusion,
            log_rate,
            rk_coefficients: spec.rk_coefficients.clone(),
            ocv_offset,
        }
    }

    /// Highest Redlich-Kister order with a non-zero coefficient.
    pub fn max_active_order(&self) -> Option<usize> {
        self.rk_coefficients.iter().rposition(|&a| a != 0.0)
    }
}

/// The physical (unscaled) cell parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParameters {
    pub cathode: ElectrodeConstants,
    pub anode: ElectrodeConstants,
    pub inner_resistance: f64,
    pub anode_initial_soc: f64,
    pub temperature: f64,
    pub faraday: f64,
    pub gas_constant: f64,
}

impl CellParameters {
    /// Cell parameters from the nine physical values (Table order) and the
    /// fixed constants of `config`.
    pub fn from_physical(values: &[f64; PARAMETER_COUNT], config: &ModelConfig) -> Self {
        let [d_c, d_a, xi_a, r_i, m_c, m_a, k_c, k_a, u0] = *values;
        Self {
            cathode: ElectrodeConstants::from_spec(&config.cathode, m_c, d_c, k_c, u0),
            anode: ElectrodeConstants::from_spec(&config.anode, m_a, d_a, k_a, 0.0),
            inner_resistance: r_i,
            anode_initial_soc: xi_a,
            temperature: config.temperature,
            faraday: config.faraday,
            gas_constant: config.gas_constant,
        }
    }

    pub fn physical_values(&self) -> [f64; PARAMETER_COUNT] {
        [
            self.cathode.diffusion,
            self.anode.diffusion,
            self.anode_initial_soc,
            self.inner_resistance,
            self.cathode.mass,
            self.anode.mass,
            self.cathode.log_rate,
            self.anode.log_rate,
            self.cathode.ocv_offset,
        ]
    }

    pub fn thermal_voltage(&self) -> f64 {
        self.gas_constant * self.temperature / self.faraday
    }

    /// True when every estimated quantity lies in its physical range.
    /// The anode rate is checked against the narrower scaled box.
    pub fn is_admissible(&self) -> bool {
        scale_parameters(self).is_ok_and(|mu| mu.is_admissible())
    }
}

/// The scaled parameter vector `mu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaledParameterVector(pub [f64; PARAMETER_COUNT]);

impl ScaledParameterVector {
    pub fn new(values: [f64; PARAMETER_COUNT]) -> Self {
        Self(values)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; PARAMETER_COUNT] = values.try_into().map_err(|_| Error::Dimension {
            expected: PARAMETER_COUNT,
            got: values.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Center of the scaled box.
    pub fn box_center() -> Self {
        let mut mu = [0.0; PARAMETER_COUNT];
        for (i, m) in mu.iter_mut().enumerate() {
            *m = 0.5 * (SCALED_LOWER[i] + SCALED_UPPER[i]);
        }
        Self(mu)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_admissible(&self) -> bool {
        self.is_finite()
            && self
                .0
                .iter()
                .enumerate()
                .all(|(i, &v)| v >= SCALED_LOWER[i] && v <= SCALED_UPPER[i])
    }

    pub fn check_admissible(&self) -> Result<()> {
        for (i, &v) in self.0.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "scaled parameter",
                });
            }
            if v < SCALED_LOWER[i] || v > SCALED_UPPER[i] {
                return Err(Error::OutOfBounds {
                    index: i + 1,
                    value: v,
                    lower: SCALED_LOWER[i],
                    upper: SCALED_UPPER[i],
                });
            }
        }
        Ok(())
    }

    /// Component-wise projection onto the box.
    pub fn clamped(&self) -> Self {
        let mut out = self.0;
        for (i, v) in out.iter_mut().enumerate() {
            *v = v.clamp(SCALED_LOWER[i], SCALED_UPPER[i]);
        }
        Self(out)
    }

    /// `||self - other||_2 / ||other||_2`.
    pub fn relative_error(&self, truth: &Self) -> f64 {
        let diff: f64 = self
            .0
            .iter()
            .zip(&truth.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = truth.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        diff / norm
    }

    pub fn with_component(&self, index: usize, value: f64) -> Self {
        let mut out = self.0;
        out[index] = value;
        Self(out)
    }
}

/// Map physical parameters to the scaled vector.
pub fn scale_parameters(p: &CellParameters) -> Result<ScaledParameterVector> {
    let v = p.physical_values();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "physical parameter",
        });
    }
    if v[0] <= 0.0 || v[1] <= 0.0 {
        return Err(Error::Data(
            "diffusion constants must be positive to be log-scaled".into(),
        ));
    }
    Ok(ScaledParameterVector([
        (v[0] / PHYSICAL_LOWER[0]).log10(),
        (v[1] / PHYSICAL_LOWER[1]).log10(),
        v[2] / midpoint(2),
        v[3] / midpoint(3),
        v[4] / midpoint(4),
        v[5] / midpoint(5),
        v[6] - CATHODE_RATE_SHIFT,
        v[7] - v[6],
        v[8] / midpoint(8),
    ]))
}

/// Inverse of [`scale_parameters`] on the nine estimated values.
pub fn unscale_values(mu: &ScaledParameterVector) -> Result<[f64; PARAMETER_COUNT]> {
    if !mu.is_finite() {
        return Err(Error::NonFinite {
            what: "scaled parameter",
        });
    }
    let m = mu.0;
    let k_c = m[6] + CATHODE_RATE_SHIFT;
    Ok([
        PHYSICAL_LOWER[0] * 10f64.powf(m[0]),
        PHYSICAL_LOWER[1] * 10f64.powf(m[1]),
        m[2] * midpoint(2),
        m[3] * midpoint(3),
        m[4] * midpoint(4),
        m[5] * midpoint(5),
        k_c,
        m[7] + k_c,
        m[8] * midpoint(8),
    ])
}

/// Physical parameters for `mu`; fixed fields are copied from `template`.
pub fn unscale_parameters(mu: &ScaledParameterVector, template: &CellParameters) -> Result<CellParameters> {
    let [d_c, d_a, xi_a, r_i, m_c, m_a, k_c, k_a, u0] = unscale_values(mu)?;
    let mut p = template.clone();
    p.cathode.diffusion = d_c;
    p.anode.diffusion = d_a;
    p.anode_initial_soc = xi_a;
    p.inner_resistance = r_i;
    p.cathode.mass = m_c;
    p.anode.mass = m_a;
    p.cathode.log_rate = k_c;
    p.anode.log_rate = k_a;
    p.cathode.ocv_offset = u0;
    p.anode.ocv_offset = 0.0;
    Ok(p)
}

/// Physical parameters for `mu` with fixed fields from a model config.
pub fn cell_parameters(mu: &ScaledParameterVector, config: &ModelConfig) -> Result<CellParameters> {
    Ok(CellParameters::from_physical(&unscale_values(mu)?, config))
}

/// The synthetic "hidden" parameter used by the virtual experiments.
pub fn synthetic_truth() -> ScaledParameterVector {
    ScaledParameterVector([1.3, 0.7, 0.8, 1.2, 0.9, 1.1, 1.5, 3.0, 1.05])
}
