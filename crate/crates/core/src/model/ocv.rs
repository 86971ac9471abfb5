//! Redlich-Kister open-circuit potential and its antiderivative.
//!
//! With `y = 2 xi - 1` the order-`k` term of the expansion is
//!
//! ```text
//! A_k * ( y^(k+1) - 2 k xi (1 - xi) / y^(k-1) )
//! ```
//!
//! Using `xi (1 - xi) = (1 - y^2) / 4` the second part becomes
//! `(k/2) (y^(1-k) - y^(3-k))`, so every term has a closed-form
//! antiderivative. For `k >= 2` it contains negative powers of `y` (and a log
//! for `k = 2, 4`); across `xi = 0.5` the closed form is the principal-value
//! continuation.

use super::params::ElectrodeConstants;
use crate::{Error, Result};

/// Guard window applied to surface concentrations before any evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceGuard {
    pub clamp: f64,
    pub pole_guard: f64,
}

impl Default for SurfaceGuard {
    fn default() -> Self {
        Self {
            clamp: 1e-6,
            pole_guard: 1e-9,
        }
    }
}

/// A guarded concentration together with whether the guard had to act.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Guarded {
    pub xi: f64,
    pub event: bool,
}

impl SurfaceGuard {
    pub fn apply(&self, xi: f64, max_order: Option<usize>) -> Result<Guarded> {
        if !xi.is_finite() {
            return Err(Error::NonFinite {
                what: "surface concentration",
            });
        }
        let mut out = xi.clamp(self.clamp, 1.0 - self.clamp);
        let mut event = out != xi;
        if max_order.is_some_and(|k| k >= 2) {
            let y = 2.0 * out - 1.0;
            if y.abs() < self.pole_guard {
                let side = if y < 0.0 { -1.0 } else { 1.0 };
                out = 0.5 + side * 0.5 * self.pole_guard;
                event = true;
            }
        }
        Ok(Guarded { xi: out, event })
    }
}

/// `ln((1 - xi) / xi)`.
fn log_term(xi: f64) -> f64 {
    (1.0 - xi).ln() - xi.ln()
}

/// Dimensionless Redlich-Kister sum (without the `R theta / F` factor).
pub fn rk_sum(coefficients: &[f64], xi: f64) -> f64 {
    let y = 2.0 * xi - 1.0;
    let xx = xi * (1.0 - xi);
    coefficients
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            if a == 0.0 {
                return 0.0;
            }
            let k_i = k as i32;
            let first = y.powi(k_i + 1);
            let second = if k == 0 {
                0.0
            } else {
                2.0 * k as f64 * xx * y.powi(1 - k_i)
            };
            a * (first - second)
        })
        .sum()
}

/// `int y^p dy`, with the logarithmic case at `p = -1`.
fn power_antiderivative(p: i32, y: f64) -> f64 {
    if p == -1 {
        y.abs().ln()
    } else {
        y.powi(p + 1) / (p + 1) as f64
    }
}

/// `int_0^xi` of [`rk_sum`].
pub fn rk_sum_integral(coefficients: &[f64], xi: f64) -> f64 {
    let y = 2.0 * xi - 1.0;
    coefficients
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            if a == 0.0 {
                return 0.0;
            }
            let k_i = k as i32;
            let first = (y.powi(k_i + 2) - (-1f64).powi(k_i + 2)) / (2.0 * (k_i + 2) as f64);
            let second = if k == 0 {
                0.0
            } else {
                let anti =
                    |y: f64| 0.25 * k as f64 * (power_antiderivative(1 - k_i, y) - power_antiderivative(3 - k_i, y));
                anti(y) - anti(-1.0)
            };
            a * (first - second)
        })
        .sum()
}

/// `int_0^xi ln((1 - x) / x) dx`.
fn log_term_integral(xi: f64) -> f64 {
    if xi <= 0.0 {
        return 0.0;
    }
    let one_minus = 1.0 - xi;
    let a = if one_minus > 0.0 {
        one_minus * one_minus.ln()
    } else {
        0.0
    };
    -a - xi * xi.ln()
}

/// Open-circuit potential `O_i(xi)` in volts. `thermal_voltage` is `R theta / F`.
///
/// `xi` is expected to be guarded already; values outside `(0, 1)` give
/// non-finite results.
pub fn rk_ocv(electrode: &ElectrodeConstants, xi: f64, thermal_voltage: f64) -> f64 {
    electrode.ocv_offset + thermal_voltage * (log_term(xi) + rk_sum(&electrode.rk_coefficients, xi))
}

/// `int_0^xi O_i(x) dx`, in volts.
pub fn rk_ocv_integral(electrode: &ElectrodeConstants, xi: f64, thermal_voltage: f64) -> f64 {
    if xi <= 0.0 {
        return 0.0;
    }
    electrode.ocv_offset * xi
        + thermal_voltage * (log_term_integral(xi) + rk_sum_integral(&electrode.rk_coefficients, xi))
}

/// `(xi - 1/2) O(xi) - int_0^xi O`, divided by the thermal voltage.
///
/// Evaluated in the dimensionless form where the offset contributes exactly
/// `-U0 / 2`, avoiding cancellation between two O(U0) quantities.
pub(crate) fn exchange_exponent(electrode: &ElectrodeConstants, xi: f64, thermal_voltage: f64) -> f64 {
    let shape = log_term(xi) + rk_sum(&electrode.rk_coefficients, xi);
    let shape_integral = log_term_integral(xi) + rk_sum_integral(&electrode.rk_coefficients, xi);
    -0.5 * electrode.ocv_offset / thermal_voltage + (xi - 0.5) * shape - shape_integral
}

/// `(O(xi), exchange_exponent)` sharing the logarithms and RK sums; the
/// simulator's hot path.
pub(crate) fn ocv_and_exchange_exponent(electrode: &ElectrodeConstants, xi: f64, thermal_voltage: f64) -> (f64, f64) {
    let ln_x = xi.ln();
    let ln_1mx = (1.0 - xi).ln();
    let rk = rk_sum(&electrode.rk_coefficients, xi);
    let shape = ln_1mx - ln_x + rk;
    let shape_integral = -(1.0 - xi) * ln_1mx - xi * ln_x + rk_sum_integral(&electrode.rk_coefficients, xi);
    let ocv = electrode.ocv_offset + thermal_voltage * shape;
    let exponent = -0.5 * electrode.ocv_offset / thermal_voltage + (xi - 0.5) * shape - shape_integral;
    (ocv, exponent)
}
