//! Rubidium vapor pressure and number density.

use crate::constants::CODATA;
use crate::error::{Error, Result};

const TORR: f64 = 101_325.0 / 760.0;
const MELTING_POINT: f64 = 312.46;

/// Saturated vapor pressure of rubidium (Pa).
///
/// Nesmeyanov correlation as tabulated in D. A. Steck, "Rubidium 87 D Line
/// Data": log10(P/torr) = 2.881 + 4.857 - 4215/T for the solid and
/// 2.881 + 4.312 - 4040/T for the liquid.
pub fn rb_vapor_pressure(temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    let log_torr = if temperature < MELTING_POINT {
        2.881 + 4.857 - 4215.0 / temperature
    } else {
        2.881 + 4.312 - 4040.0 / temperature
    };
    Ok(10f64.powf(log_torr) * TORR)
}

/// Ideal-gas atom density n = P / (k_B T) above the melt (1/m^3).
pub fn rb_number_density(temperature: f64) -> Result<f64> {
    Ok(rb_vapor_pressure(temperature)? / (CODATA.k_b * temperature))
}
