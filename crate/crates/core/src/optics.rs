//! Gaussian beams and the dipole potentials built from them: the spin-dependent
//! Stern-Gerlach beam, the tweezer and the light sheet.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::constants::{AU_POLARIZABILITY, EPSILON_0, SPEED_OF_LIGHT, SR87_F};
use crate::error::{Error, Result};

/// Elliptical Gaussian beam.
///
/// `waist[0]` is the 1/e² intensity radius along `transverse_axis`,
/// `waist[1]` along `propagation_axis × transverse_axis`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GaussianBeam {
    /// W.
    pub power: f64,
    /// m.
    pub waist: [f64; 2],
    /// Focus position, m.
    pub center: [f64; 3],
    pub propagation_axis: [f64; 3],
    pub transverse_axis: [f64; 3],
    /// m.
    pub wavelength: f64,
    /// Include the axial growth of the waist; otherwise the beam is a
    /// non-diverging Gaussian cylinder.
    pub divergence: bool,
}

/// Beam-local frame and Rayleigh ranges, computed once per evaluation.
struct Frame {
    k: Vector3<f64>,
    ea: Vector3<f64>,
    eb: Vector3<f64>,
    center: Vector3<f64>,
}

impl GaussianBeam {
    pub fn validate(&self) -> Result<()> {
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(Error::invalid("beam power must be finite and non-negative"));
        }
        if !(self.waist.iter().all(|w| *w > 0.0 && w.is_finite()) && self.wavelength > 0.0) {
            return Err(Error::invalid("beam waists and wavelength must be positive"));
        }
        let k = Vector3::from(self.propagation_axis);
        let a = Vector3::from(self.transverse_axis);
        if k.norm() == 0.0 || a.norm() == 0.0 {
            return Err(Error::invalid("beam axes must be non-zero"));
        }
        if (k.normalize().dot(&a.normalize())).abs() > 1e-9 {
            return Err(Error::invalid("transverse axis must be perpendicular to propagation"));
        }
        Ok(())
    }

    fn frame(&self) -> Frame {
        let k = Vector3::from(self.propagation_axis).normalize();
        let ea = Vector3::from(self.transverse_axis).normalize();
        Frame { eb: k.cross(&ea), k, ea, center: Vector3::from(self.center) }
    }

    pub fn rayleigh_ranges(&self) -> [f64; 2] {
        [PI * self.waist[0].powi(2) / self.wavelength, PI * self.waist[1].powi(2) / self.wavelength]
    }

    /// Peak intensity at focus, `2P/(π·w_a·w_b)`.
    pub fn peak_intensity(&self) -> f64 {
        2.0 * self.power / (PI * self.waist[0] * self.waist[1])
    }

    pub fn intensity(&self, r: &Vector3<f64>) -> f64 {
        self.intensity_and_gradient(r).0
    }

    /// Intensity (W/m²) and its analytic gradient (W/m³).
    pub fn intensity_and_gradient(&self, r: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let f = self.frame();
        let d = r - f.center;
        let (s, a, b) = (d.dot(&f.k), d.dot(&f.ea), d.dot(&f.eb));
        let zr = self.rayleigh_ranges();

        // per transverse axis: w(s)², and d(ln I)/ds contribution
        let mut w2 = [0.0; 2];
        let mut dln_ds = 0.0;
        for (i, coord) in [a, b].into_iter().enumerate() {
            let w0sq = self.waist[i].powi(2);
            if self.divergence {
                let grow = 1.0 + (s / zr[i]).powi(2);
                w2[i] = w0sq * grow;
                let dw2_ds = 2.0 * w0sq * s / zr[i].powi(2);
                dln_ds += -0.5 * dw2_ds / w2[i] + 2.0 * coord * coord * dw2_ds / (w2[i] * w2[i]);
            } else {
                w2[i] = w0sq;
            }
        }
        let intensity =
            2.0 * self.power / (PI * (w2[0] * w2[1]).sqrt()) * (-2.0 * a * a / w2[0] - 2.0 * b * b / w2[1]).exp();
        let grad_ln = f.ea * (-4.0 * a / w2[0]) + f.eb * (-4.0 * b / w2[1]) + f.k * dln_ds;
        (intensity, grad_ln * intensity)
    }
}

/// Ground-state polarizability for linear polarization (vector part absent).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PolarizabilitySpec {
    /// Atomic units.
    pub alpha_scalar: f64,
    /// Atomic units.
    pub alpha_tensor: f64,
    pub spin: f64,
    /// C·m²/V per atomic unit.
    pub au_to_si: f64,
    /// Light blue-detuned from the dominant transition: positive effective
    /// polarizability then raises the energy at high intensity.
    pub blue_detuned: bool,
}

impl Default for PolarizabilitySpec {
    fn default() -> Self {
        PolarizabilitySpec {
            alpha_scalar: 7.2e3,
            alpha_tensor: 42.5e3,
            spin: SR87_F,
            au_to_si: AU_POLARIZABILITY,
            blue_detuned: true,
        }
    }
}

/// Rank-2 light-shift weight `(3m² − F(F+1)) / (F(2F−1))`.
pub fn tensor_weight(m: f64, spin: f64) -> Result<f64> {
    if !(m.abs() <= spin + 1e-12) {
        return Err(Error::invalid(format!("|m| = {} exceeds F = {spin}", m.abs())));
    }
    if spin < 1.0 {
        return Err(Error::invalid("tensor light shift requires F ≥ 1"));
    }
    Ok((3.0 * m * m - spin * (spin + 1.0)) / (spin * (2.0 * spin - 1.0)))
}

impl PolarizabilitySpec {
    /// `α_s + α_t·w(m)`, atomic units.
    pub fn alpha_eff_au(&self, m: f64) -> Result<f64> {
        Ok(self.alpha_scalar + self.alpha_tensor * tensor_weight(m, self.spin)?)
    }

    /// Signed SI polarizability entering `U = −α·I/(2ε₀c)`.
    pub fn alpha_eff_si(&self, m: f64) -> Result<f64> {
        let sign = if self.blue_detuned { -1.0 } else { 1.0 };
        Ok(sign * self.alpha_eff_au(m)? * self.au_to_si)
    }
}

/// Spin-dependent conservative potential acting on an atom.
pub trait Potential: Send + Sync {
    /// J.
    fn energy(&self, r: &Vector3<f64>, m: f64) -> f64;
    /// N, equal to `−∇energy`.
    fn force(&self, r: &Vector3<f64>, m: f64) -> Vector3<f64>;
    /// Largest local oscillation angular frequency the potential can impose on
    /// an atom of `mass`; used to bound integration steps.
    fn max_angular_frequency(&self, mass: f64) -> f64;
}

/// Optical Stern-Gerlach beam.
#[derive(Clone, Debug)]
pub struct OsgPotential {
    pub beam: GaussianBeam,
    pub polarizability: PolarizabilitySpec,
    alpha_si: [f64; 10],
}

impl OsgPotential {
    pub fn new(beam: GaussianBeam, polarizability: PolarizabilitySpec) -> Result<Self> {
        beam.validate()?;
        let dim = (2.0 * polarizability.spin).round() as usize + 1;
        if dim > 10 {
            return Err(Error::invalid("Stern-Gerlach potential supports F ≤ 9/2"));
        }
        let mut alpha_si = [0.0; 10];
        for (i, a) in alpha_si.iter_mut().enumerate().take(dim) {
            *a = polarizability.alpha_eff_si(polarizability.spin - i as f64)?;
        }
        Ok(OsgPotential { beam, polarizability, alpha_si })
    }

    fn alpha(&self, m: f64) -> f64 {
        let i = (self.polarizability.spin - m).round();
        if i >= 0.0 && (i as usize) < self.alpha_si.len() && (m.abs() <= self.polarizability.spin) {
            self.alpha_si[i as usize]
        } else {
            panic!("m = {m} outside the spin-{} manifold", self.polarizability.spin)
        }
    }

    fn prefactor(&self, m: f64) -> f64 {
        -self.alpha(m) / (2.0 * EPSILON_0 * SPEED_OF_LIGHT)
    }
}

/// `U(r, m) = −α_eff(m)·I(r)/(2ε₀c)`.
pub fn osg_potential(beam: &GaussianBeam, pol: &PolarizabilitySpec, r: &Vector3<f64>, m: f64) -> Result<f64> {
    let alpha = pol.alpha_eff_si(m)?;
    Ok(-alpha * beam.intensity(r) / (2.0 * EPSILON_0 * SPEED_OF_LIGHT))
}

impl Potential for OsgPotential {
    fn energy(&self, r: &Vector3<f64>, m: f64) -> f64 {
        self.prefactor(m) * self.beam.intensity(r)
    }

    fn force(&self, r: &Vector3<f64>, m: f64) -> Vector3<f64> {
        -self.beam.intensity_and_gradient(r).1 * self.prefactor(m)
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        let u_max = self.alpha_si.iter().map(|a| a.abs()).fold(0.0, f64::max) * self.beam.peak_intensity()
            / (2.0 * EPSILON_0 * SPEED_OF_LIGHT);
        let w = self.beam.waist[0].min(self.beam.waist[1]);
        (4.0 * u_max / (mass * w * w)).sqrt()
    }
}

/// Far-detuned, spin-independent trap: `U(r) = −depth·I(r)/I_peak`.
#[derive(Clone, Debug)]
pub struct DipoleTrap {
    pub beam: GaussianBeam,
    /// J, positive.
    pub depth: f64,
}

impl DipoleTrap {
    pub fn new(beam: GaussianBeam, depth: f64) -> Result<Self> {
        beam.validate()?;
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::invalid("trap depth must be positive"));
        }
        Ok(DipoleTrap { beam, depth })
    }

    fn scale(&self) -> f64 {
        self.depth / self.beam.peak_intensity()
    }

    /// Radial angular frequency at the focus along each transverse axis,
    /// `√(4·depth/(m·w²))`.
    pub fn radial_frequencies(&self, mass: f64) -> [f64; 2] {
        self.beam.waist.map(|w| (4.0 * self.depth / (mass * w * w)).sqrt())
    }

    /// Axial angular frequency `√(2·depth/(m·z_R²))` with `z_R` the geometric
    /// mean of the two Rayleigh ranges; zero for a non-diverging beam.
    pub fn axial_frequency(&self, mass: f64) -> f64 {
        if !self.beam.divergence {
            return 0.0;
        }
        let [za, zb] = self.beam.rayleigh_ranges();
        // curvature along s: depth·(1/za² + 1/zb²)/2·2
        (self.depth * (1.0 / (za * za) + 1.0 / (zb * zb)) / mass).sqrt()
    }
}

/// `U(r) = −depth·Î(r)` for a tweezer.
pub fn tweezer_potential(beam: &GaussianBeam, depth: f64, r: &Vector3<f64>) -> f64 {
    -depth * beam.intensity(r) / beam.peak_intensity()
}

/// Same profile law as the tweezer; the light sheet differs only by its
/// elliptical waists.
pub fn lightsheet_potential(beam: &GaussianBeam, depth: f64, r: &Vector3<f64>) -> f64 {
    tweezer_potential(beam, depth, r)
}

impl Potential for DipoleTrap {
    fn energy(&self, r: &Vector3<f64>, _m: f64) -> f64 {
        -self.scale() * self.beam.intensity(r)
    }

    fn force(&self, r: &Vector3<f64>, _m: f64) -> Vector3<f64> {
        self.beam.intensity_and_gradient(r).1 * self.scale()
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        let [a, b] = self.radial_frequencies(mass);
        a.max(b).max(self.axial_frequency(mass))
    }
}

/// Isotropic-or-not harmonic well `½·m·Σ ωᵢ²·xᵢ²`.
#[derive(Clone, Debug)]
pub struct Harmonic {
    pub omega: [f64; 3],
    pub mass: f64,
    pub center: Vector3<f64>,
}

impl Potential for Harmonic {
    fn energy(&self, r: &Vector3<f64>, _m: f64) -> f64 {
        let d = r - self.center;
        0.5 * self.mass * (0..3).map(|i| self.omega[i].powi(2) * d[i] * d[i]).sum::<f64>()
    }

    fn force(&self, r: &Vector3<f64>, _m: f64) -> Vector3<f64> {
        let d = r - self.center;
        Vector3::from_fn(|i, _| -self.mass * self.omega[i].powi(2) * d[i])
    }

    fn max_angular_frequency(&self, _mass: f64) -> f64 {
        self.omega.iter().copied().fold(0.0, f64::max)
    }
}

/// Uniform gravity along `-z`.
#[derive(Clone, Debug)]
pub struct Gravity {
    pub mass: f64,
    pub g: f64,
}

impl Potential for Gravity {
    fn energy(&self, r: &Vector3<f64>, _m: f64) -> f64 {
        self.mass * self.g * r.z
    }

    fn force(&self, _r: &Vector3<f64>, _m: f64) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.mass * self.g)
    }

    fn max_angular_frequency(&self, _mass: f64) -> f64 {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{BOLTZMANN, SR87_MASS};

    fn osg_beam() -> GaussianBeam {
        GaussianBeam {
            power: 2.8e-3,
            waist: [4.0e-6, 4.0e-6],
            center: [0.0, -2.0e-6, 0.0],
            propagation_axis: [0.0, 0.0, 1.0],
            transverse_axis: [1.0, 0.0, 0.0],
            wavelength: 689e-9,
            divergence: false,
        }
    }

    fn tweezer() -> GaussianBeam {
        GaussianBeam {
            power: 1.0,
            waist: [1.35e-6, 1.35e-6],
            center: [0.0; 3],
            propagation_axis: [0.0, 0.0, 1.0],
            transverse_axis: [1.0, 0.0, 0.0],
            wavelength: 813e-9,
            divergence: true,
        }
    }

    #[test]
    fn tensor_weight_values() {
        assert!((tensor_weight(4.5, 4.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((tensor_weight(-4.5, 4.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((tensor_weight(2.5, 4.5).unwrap() + 1.0 / 6.0).abs() < 1e-15);
        assert!((tensor_weight(0.5, 4.5).unwrap() + 2.0 / 3.0).abs() < 1e-15);
        assert!(tensor_weight(5.5, 4.5).is_err());
    }

    #[test]
    fn effective_polarizabilities() {
        let pol = PolarizabilitySpec::default();
        let a92 = pol.alpha_eff_au(4.5).unwrap();
        let a52 = pol.alpha_eff_au(2.5).unwrap();
        let a12 = pol.alpha_eff_au(0.5).unwrap();
        assert!((a92 - 49_700.0).abs() < 1e-9);
        assert!((a52 - (7200.0 - 42_500.0 / 6.0)).abs() < 1e-9);
        assert!(a52 / a92 < 0.01 && a52 / a92 > 0.0);
        assert!((a12 + 21_133.333_333).abs() < 1e-3);
        for m in [0.5, 1.5, 2.5, 3.5, 4.5] {
            assert_eq!(pol.alpha_eff_au(m).unwrap(), pol.alpha_eff_au(-m).unwrap());
        }
    }

    #[test]
    fn power_integrates_over_transverse_plane() {
        let mut beam = osg_beam();
        beam.waist = [3.0e-6, 5.0e-6];
        beam.divergence = true;
        let n = 801;
        let half = 20e-6;
        let h = 2.0 * half / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r = Vector3::new(-half + i as f64 * h, -2e-6 - half + j as f64 * h, 0.0);
                total += beam.intensity(&r);
            }
        }
        total *= h * h;
        assert!((total / beam.power - 1.0).abs() < 1e-6, "{total}");
        assert!((beam.intensity(&Vector3::new(0.0, -2e-6, 0.0)) - beam.peak_intensity()).abs() < 1e-6);
    }

    fn check_gradient(pot: &dyn Potential, pts: &[Vector3<f64>], m: f64) {
        for r in pts {
            let f = pot.force(r, m);
            let scale = f.norm();
            for ax in 0..3 {
                let mut e = Vector3::zeros();
                let h = 1e-10;
                e[ax] = h;
                let fd = -(pot.energy(&(r + e), m) - pot.energy(&(r - e), m)) / (2.0 * h);
                assert!((fd - f[ax]).abs() <= 1e-6 * scale + 1e-35, "axis {ax} at {r:?}: {fd} vs {}", f[ax]);
            }
        }
    }

    #[test]
    fn forces_match_central_differences() {
        let pts: Vec<_> = (0..25)
            .map(|k| {
                let t = k as f64;
                Vector3::new(1e-6 * (0.7 * t).sin() * 2.5, 1e-6 * (1.3 * t).cos() * 2.0, 3e-6 * (0.4 * t).sin())
            })
            .collect();
        let osg = OsgPotential::new(osg_beam(), PolarizabilitySpec::default()).unwrap();
        check_gradient(&osg, &pts, 4.5);
        check_gradient(&osg, &pts, -0.5);
        let mut diverging = osg_beam();
        diverging.divergence = true;
        diverging.waist = [1.5e-6, 2.2e-6];
        let osg2 = OsgPotential::new(diverging, PolarizabilitySpec::default()).unwrap();
        check_gradient(&osg2, &pts, 3.5);
        let trap = DipoleTrap::new(tweezer(), 3.7e-6 * BOLTZMANN).unwrap();
        check_gradient(&trap, &pts, 0.0);
    }

    #[test]
    fn osg_signs_and_parity() {
        let pol = PolarizabilitySpec::default();
        let beam = osg_beam();
        let r = Vector3::new(0.0, 0.0, 0.0);
        let u92 = osg_potential(&beam, &pol, &r, 4.5).unwrap();
        let u12 = osg_potential(&beam, &pol, &r, 0.5).unwrap();
        assert!(u92 > 0.0 && u12 < 0.0);
        for m in [0.5, 1.5, 2.5, 3.5, 4.5] {
            assert_eq!(
                osg_potential(&beam, &pol, &r, m).unwrap(),
                osg_potential(&beam, &pol, &r, -m).unwrap()
            );
        }
        let far = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(osg_potential(&beam, &pol, &far, 4.5).unwrap(), 0.0);
        // 9/2 is pushed away from the beam centre (+y), 1/2 toward it
        let osg = OsgPotential::new(beam, pol).unwrap();
        assert!(osg.force(&r, 4.5).y > 0.0);
        assert!(osg.force(&r, 0.5).y < 0.0);
    }

    #[test]
    fn tweezer_depth_and_frequency() {
        let depth = 3.7e-6 * BOLTZMANN;
        let beam = tweezer();
        assert!((tweezer_potential(&beam, depth, &Vector3::zeros()) + depth).abs() < 1e-40);
        assert!(tweezer_potential(&beam, depth, &Vector3::new(1e-3, 0.0, 0.0)).abs() < 1e-300);
        let trap = DipoleTrap::new(beam, depth).unwrap();
        let h = 1e-10;
        let curv = (trap.energy(&Vector3::new(h, 0.0, 0.0), 0.0) - 2.0 * trap.energy(&Vector3::zeros(), 0.0)
            + trap.energy(&Vector3::new(-h, 0.0, 0.0), 0.0))
            / (h * h);
        let omega_fd = (curv / SR87_MASS).sqrt();
        let omega = trap.radial_frequencies(SR87_MASS)[0];
        assert!((omega_fd / omega - 1.0).abs() < 1e-6, "{omega_fd} vs {omega}");
    }
}
