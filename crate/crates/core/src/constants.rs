//! Physical constants (CODATA 2018) and strontium-87 properties.

use std::f64::consts::PI;

pub const HBAR: f64 = 1.054_571_817e-34;
pub const PLANCK: f64 = 6.626_070_15e-34;
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
pub const NUCLEAR_MAGNETON: f64 = 5.050_783_746_1e-27;
pub const STANDARD_GRAVITY: f64 = 9.806_65;

/// SI value of one atomic unit of polarizability, C·m²/V.
pub const AU_POLARIZABILITY: f64 = 1.648_777_274_36e-41;

/// Mass of ⁸⁷Sr, kg.
pub const SR87_MASS: f64 = 87.0 * ATOMIC_MASS_UNIT;

/// Ground-state total angular momentum of ⁸⁷Sr (pure nuclear spin).
pub const SR87_F: f64 = 4.5;

/// Nuclear magnetic moment of ⁸⁷Sr in nuclear magnetons.
pub const SR87_NUCLEAR_MOMENT: f64 = -1.0936;

/// Ground-state Zeeman coefficient, Hz/G. Negative sign of the moment kept.
pub fn sr87_g_factor_hz_per_gauss() -> f64 {
    SR87_NUCLEAR_MOMENT * NUCLEAR_MAGNETON / (SR87_F * PLANCK) * 1e-4
}

/// 461 nm ¹S₀ → ¹P₁ imaging transition.
pub const BLUE_WAVELENGTH: f64 = 461e-9;
pub const BLUE_LINEWIDTH: f64 = 2.0 * PI * 30.5e6;

/// Single-photon recoil velocity on the imaging transition, m/s.
pub fn blue_recoil_velocity() -> f64 {
    PLANCK / (SR87_MASS * BLUE_WAVELENGTH)
}
