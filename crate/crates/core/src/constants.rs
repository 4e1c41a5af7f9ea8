//! CODATA 2018 physical constants (SI).

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhysicalConstants {
    /// Elementary charge (C).
    pub e: f64,
    /// Electron mass (kg).
    pub m_e: f64,
    /// Speed of light (m/s).
    pub c: f64,
    /// Vacuum permittivity (F/m).
    pub eps0: f64,
    /// Planck constant (J s).
    pub h: f64,
    /// Reduced Planck constant (J s).
    pub hbar: f64,
    /// Boltzmann constant (J/K).
    pub k_b: f64,
    /// Bohr magneton (J/T).
    pub mu_b: f64,
}

pub const PLANCK: f64 = 6.626_070_15e-34;

pub const CODATA: PhysicalConstants = PhysicalConstants {
    e: 1.602_176_634e-19,
    m_e: 9.109_383_701_5e-31,
    c: 299_792_458.0,
    eps0: 8.854_187_812_8e-12,
    h: PLANCK,
    hbar: PLANCK / (2.0 * std::f64::consts::PI),
    k_b: 1.380_649e-23,
    mu_b: 9.274_010_078_3e-24,
};
