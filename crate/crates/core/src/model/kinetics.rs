//! Butler-Volmer kinetics: exchange current, boundary flux and the inverted
//! electrode potential.

use super::ocv::{exchange_exponent, ocv_and_exchange_exponent, rk_ocv};
use super::params::ElectrodeConstants;
use crate::{Error, Result};

/// Largest exponent accepted before `exp` is considered an overflow.
const EXP_LIMIT: f64 = 709.0;

/// `ln j0` at surface concentration `xi`.
pub fn log_exchange_current(electrode: &ElectrodeConstants, xi: f64, thermal_voltage: f64) -> f64 {
    electrode.log_rate + exchange_exponent(electrode, xi, thermal_voltage)
}

/// Exchange current density `j0 = exp(k~ + (F/R theta)((xi - 1/2) O - int O))`.
pub fn exchange_current(
    electrode: &ElectrodeConstants,
    xi: f64,
    thermal_voltage: f64,
    name: &'static str,
) -> Result<f64> {
    let log = log_exchange_current(electrode, xi, thermal_voltage);
    if !log.is_finite() || log > EXP_LIMIT {
        return Err(Error::ExchangeOverflow { electrode: name, xi });
    }
    Ok(log.exp())
}

/// Reaction flux fixed by the applied cell current:
/// `j = -i rho R / (3 m F)`.
pub fn boundary_flux(electrode: &ElectrodeConstants, current: f64, faraday: f64) -> f64 {
    -current * electrode.density * electrode.radius / (3.0 * electrode.mass * faraday)
}

/// `asinh(sign * exp(log_ratio))` without overflowing for huge ratios.
fn asinh_of_log_ratio(sign: f64, log_ratio: f64) -> f64 {
    if log_ratio > 300.0 {
        sign * (std::f64::consts::LN_2 + log_ratio)
    } else {
        (sign * log_ratio.exp()).asinh()
    }
}

/// Electrode potential `u = O(xi) + (R theta/F) asinh(j / j0)`.
///
/// The ratio `j / j0` is formed in log space, so tiny exchange currents do
/// not underflow as long as `ln j0` itself is finite.
pub fn electrode_potential(
    electrode: &ElectrodeConstants,
    xi: f64,
    current: f64,
    thermal_voltage: f64,
    faraday: f64,
    name: &'static str,
) -> Result<f64> {
    let flux = boundary_flux(electrode, current, faraday);
    if flux == 0.0 {
        return Ok(rk_ocv(electrode, xi, thermal_voltage));
    }
    let (ocv, exponent) = ocv_and_exchange_exponent(electrode, xi, thermal_voltage);
    let log_j0 = electrode.log_rate + exponent;
    if !log_j0.is_finite() {
        return Err(Error::ExchangeUnderflow { electrode: name, xi });
    }
    let log_ratio = flux.abs().ln() - log_j0;
    Ok(ocv + thermal_voltage * asinh_of_log_ratio(flux.signum(), log_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, DEFAULT_TEMPERATURE, FARADAY, GAS_CONSTANT};
    use crate::model::ocv::rk_ocv_integral;
    use crate::model::params::{cell_parameters, synthetic_truth};

    const VT: f64 = GAS_CONSTANT * DEFAULT_TEMPERATURE / FARADAY;

    fn truth() -> crate::model::params::CellParameters {
        cell_parameters(&synthetic_truth(), &ModelConfig::default()).unwrap()
    }

    #[test]
    fn constant_ocv_seam() {
        // The offset c alone contributes (xi - 1/2) c - c xi = -c/2; at
        // xi = 1/2 the log term adds -int_0^(1/2) ln((1-x)/x) dx = -ln 2.
        let mut e = truth().anode;
        e.rk_coefficients.clear();
        e.ocv_offset = 0.2;
        e.log_rate = -3.0;
        let xi = 0.5;
        let j0 = exchange_current(&e, xi, VT, "anode").unwrap();
        let shape_part = -std::f64::consts::LN_2;
        let expected = (-3.0 - 0.2 / (2.0 * VT) + shape_part).exp();
        assert!((j0 / expected - 1.0).abs() < 1e-13);
    }

    #[test]
    fn exchange_current_matches_composed_oracle() {
        let p = truth();
        for e in [&p.cathode, &p.anode] {
            let xi = 0.4;
            let o = rk_ocv(e, xi, VT);
            let int = rk_ocv_integral(e, xi, VT);
            let oracle = e.log_rate + ((xi - 0.5) * o - int) / VT;
            let log = log_exchange_current(e, xi, VT);
            assert!((log - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
        }
        let j0 = exchange_current(&p.anode, 0.4, VT, "anode").unwrap();
        assert!(j0 > 0.0);
    }

    #[test]
    fn overflow_is_reported() {
        let mut e = truth().anode;
        e.log_rate = 800.0;
        assert!(matches!(
            exchange_current(&e, 0.3, VT, "anode"),
            Err(Error::ExchangeOverflow { .. })
        ));
    }

    #[test]
    fn flux_is_linear_in_current() {
        let e = truth().cathode;
        assert_eq!(boundary_flux(&e, 0.0, FARADAY), 0.0);
        let one = boundary_flux(&e, 1.0, FARADAY);
        assert_eq!(boundary_flux(&e, 2.0, FARADAY), 2.0 * one);
        let hand = -e.density * e.radius / (3.0 * e.mass * FARADAY);
        assert!((one - hand).abs() <= 1e-15 * hand.abs());
    }

    #[test]
    fn zero_current_gives_ocv() {
        let e = truth().cathode;
        let u = electrode_potential(&e, 0.3, 0.0, VT, FARADAY, "cathode").unwrap();
        assert_eq!(u, rk_ocv(&e, 0.3, VT));
    }

    #[test]
    fn overpotential_grows_with_current() {
        let p = truth();
        for e in [&p.cathode, &p.anode] {
            let o = rk_ocv(e, 0.3, VT);
            let mut prev = 0.0;
            for i in [0.5, 1.0, 2.0, 4.0, 8.8] {
                let eta = (electrode_potential(e, 0.3, i, VT, FARADAY, "x").unwrap() - o).abs();
                assert!(eta > prev);
                prev = eta;
            }
        }
    }

    #[test]
    fn butler_volmer_round_trip() {
        let p = truth();
        for e in [&p.cathode, &p.anode] {
            for i in [-8.8, -1.0, 0.3, 5.0] {
                let xi = 0.35;
                let u = electrode_potential(e, xi, i, VT, FARADAY, "x").unwrap();
                let j0 = exchange_current(e, xi, VT, "x").unwrap();
                let forward = j0 * ((u - rk_ocv(e, xi, VT)) / VT).sinh();
                let j = boundary_flux(e, i, FARADAY);
                assert!((forward / j - 1.0).abs() < 1e-12, "{forward} vs {j}");
            }
        }
    }
}
