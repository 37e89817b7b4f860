use nalgebra::Vector3;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AtomSample;
use crate::constants::{BOLTZMANN, HBAR, SR87_F, SR87_MASS};
use crate::error::{Error, Result};
use crate::optics::{DipoleTrap, Potential};
use crate::rng::{domain, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    ClassicalBoltzmann,
    GroundStateWigner,
}

/// Harmonic description of the trap the atoms start in.
#[derive(Clone, Debug)]
pub struct TrapModel {
    /// Angular frequencies per axis, rad/s.
    pub omega: [f64; 3],
    pub center: Vector3<f64>,
    /// When set, samples whose energy in this trap is not negative are
    /// redrawn: a thermal distribution cropped to bound states.
    pub bound_in: Option<DipoleTrap>,
}

impl TrapModel {
    pub fn harmonic(omega: [f64; 3]) -> Self {
        TrapModel { omega, center: Vector3::zeros(), bound_in: None }
    }

    /// Harmonic approximation of a Gaussian trap, cropped to its bound states.
    pub fn cropped(trap: DipoleTrap, mass: f64) -> Self {
        let [wa, wb] = trap.radial_frequencies(mass);
        let wz = trap.axial_frequency(mass);
        let center = Vector3::from(trap.beam.center);
        // radial axes of the beam are assumed to be x and y of the lab frame
        TrapModel { omega: [wa, wb, wz], center, bound_in: Some(trap) }
    }
}

#[derive(Clone, Debug)]
pub struct ThermalSource {
    /// K.
    pub temperature: f64,
    pub trap: TrapModel,
    pub mode: SamplingMode,
    /// kg.
    pub mass: f64,
}

impl ThermalSource {
    pub fn new(temperature: f64, trap: TrapModel, mode: SamplingMode) -> Self {
        ThermalSource { temperature, trap, mode, mass: SR87_MASS }
    }

    /// Per-axis position and velocity standard deviations.
    pub fn widths(&self) -> Result<([f64; 3], [f64; 3])> {
        let mut sx = [0.0; 3];
        let mut sv = [0.0; 3];
        for i in 0..3 {
            let w = self.trap.omega[i];
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid("trap frequencies must be positive"));
            }
            match self.mode {
                SamplingMode::ClassicalBoltzmann => {
                    if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                        return Err(Error::invalid(
                            "classical sampling needs T > 0 (use ground-state-wigner for T = 0)",
                        ));
                    }
                    sv[i] = (BOLTZMANN * self.temperature / self.mass).sqrt();
                    sx[i] = sv[i] / w;
                }
                SamplingMode::GroundStateWigner => {
                    sx[i] = (HBAR / (2.0 * self.mass * w)).sqrt();
                    sv[i] = (HBAR * w / (2.0 * self.mass)).sqrt();
                }
            }
        }
        Ok((sx, sv))
    }
}

/// Spin-state preparation applied to sampled atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpinPreparation {
    /// All ten m_F equally likely.
    Unpolarized,
    /// Everything in m_F = +9/2.
    Stretched,
    /// Explicit populations, index `i` ↔ `m = 9/2 − i`.
    Populations([f64; 10]),
}

const MAX_REJECTIONS: usize = 100_000;

/// Draws `n` atoms, all labelled `m_F = +9/2`.
pub fn sample_atoms(source: &ThermalSource, n: usize, seed: u64) -> Result<Vec<AtomSample>> {
    if n == 0 {
        return Err(Error::invalid("need at least one atom"));
    }
    let (sx, sv) = source.widths()?;
    (0..n).map(|i| sample_one(source, &sx, &sv, seed, i as u64)).collect()
}

fn sample_one(source: &ThermalSource, sx: &[f64; 3], sv: &[f64; 3], seed: u64, index: u64) -> Result<AtomSample> {
    let mut rng = stream(seed, domain::ATOM_SAMPLING, index);
    for _ in 0..MAX_REJECTIONS {
        let mut pos = source.trap.center;
        let mut vel = Vector3::zeros();
        for ax in 0..3 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            pos[ax] += sx[ax] * a;
            vel[ax] = sv[ax] * b;
        }
        if let Some(trap) = &source.trap.bound_in {
            let e = 0.5 * source.mass * vel.norm_squared() + trap.energy(&pos, 0.0);
            if e >= 0.0 {
                continue;
            }
        }
        return Ok(AtomSample { position: pos, velocity: vel, m_f: SR87_F, alive: true });
    }
    Err(Error::invalid("trap too shallow: no bound sample found"))
}

/// Relabels atoms with spins drawn from `prep`.
pub fn assign_spins(atoms: &mut [AtomSample], prep: &SpinPreparation, seed: u64) -> Result<()> {
    let weights: [f64; 10] = match prep {
        SpinPreparation::Unpolarized => [0.1; 10],
        SpinPreparation::Stretched => {
            let mut w = [0.0; 10];
            w[0] = 1.0;
            w
        }
        SpinPreparation::Populations(p) => *p,
    };
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(format!("spin populations: {e}")))?;
    for (i, atom) in atoms.iter_mut().enumerate() {
        let mut rng = stream(seed, domain::SPIN_LABEL, i as u64);
        let k = dist.sample(&mut rng);
        atom.m_f = SR87_F - k as f64;
    }
    Ok(())
}

/// Uniform draw helper shared by the sub-modules.
pub(crate) fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let cos_t: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::GaussianBeam;

    fn tweezer_trap() -> DipoleTrap {
        let beam = GaussianBeam {
            power: 1.0,
            waist: [1.35e-6, 1.35e-6],
            center: [0.0; 3],
            propagation_axis: [0.0, 0.0, 1.0],
            transverse_axis: [1.0, 0.0, 0.0],
            wavelength: 813e-9,
            divergence: true,
        };
        DipoleTrap::new(beam, 3.7e-6 * BOLTZMANN).unwrap()
    }

    fn std_dev(xs: impl Iterator<Item = f64> + Clone) -> f64 {
        let n = xs.clone().count() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn classical_marginals_and_equipartition() {
        let trap = tweezer_trap();
        let omega = trap.radial_frequencies(SR87_MASS);
        let source = ThermalSource::new(750e-9, TrapModel::harmonic([omega[0], omega[1], 5.0e3]), SamplingMode::ClassicalBoltzmann);
        let atoms = sample_atoms(&source, 100_000, 11).unwrap();
        let (sx, sv) = source.widths().unwrap();
        assert!((sv[0] - 8.46e-3).abs() < 0.05e-3, "σ_v = {}", sv[0]);
        for ax in 0..3 {
            let s_x = std_dev(atoms.iter().map(|a| a.position[ax]));
            let s_v = std_dev(atoms.iter().map(|a| a.velocity[ax]));
            assert!((s_x / sx[ax] - 1.0).abs() < 0.01);
            assert!((s_v / sv[ax] - 1.0).abs() < 0.01);
            let e: f64 = atoms
                .iter()
                .map(|a| 0.5 * SR87_MASS * (a.velocity[ax].powi(2) + (source.trap.omega[ax] * a.position[ax]).powi(2)))
                .sum::<f64>()
                / atoms.len() as f64;
            assert!((e / (BOLTZMANN * 750e-9) - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn zero_temperature_limit_and_errors() {
        let src = ThermalSource::new(1e-30, TrapModel::harmonic([1e4; 3]), SamplingMode::ClassicalBoltzmann);
        for a in sample_atoms(&src, 10, 1).unwrap() {
            assert!(a.position.norm() < 1e-15 && a.velocity.norm() < 1e-12);
        }
        let cold = ThermalSource::new(0.0, TrapModel::harmonic([1e4; 3]), SamplingMode::ClassicalBoltzmann);
        assert!(sample_atoms(&cold, 10, 1).is_err());
        let wigner = ThermalSource::new(0.0, TrapModel::harmonic([1e4; 3]), SamplingMode::GroundStateWigner);
        let (sx, sv) = wigner.widths().unwrap();
        assert!((sx[0] - (HBAR / (2.0 * SR87_MASS * 1e4)).sqrt()).abs() < 1e-20);
        assert!((sx[0] * sv[0] * SR87_MASS - HBAR / 2.0).abs() < 1e-45);
        assert!(sample_atoms(&wigner, 0, 1).is_err());
    }

    #[test]
    fn cropped_samples_are_bound() {
        let trap = tweezer_trap();
        let src = ThermalSource::new(750e-9, TrapModel::cropped(trap.clone(), SR87_MASS), SamplingMode::ClassicalBoltzmann);
        for a in sample_atoms(&src, 2000, 3).unwrap() {
            assert!(0.5 * SR87_MASS * a.velocity.norm_squared() + trap.energy(&a.position, 0.0) < 0.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let src = ThermalSource::new(750e-9, TrapModel::harmonic([2e4, 2e4, 3e3]), SamplingMode::ClassicalBoltzmann);
        let a = sample_atoms(&src, 50, 9).unwrap();
        let b = sample_atoms(&src, 80, 9).unwrap();
        assert_eq!(a[..], b[..50]);
        assert_ne!(a, sample_atoms(&src, 50, 10).unwrap());
    }

    #[test]
    fn unpolarized_spin_labels() {
        let src = ThermalSource::new(750e-9, TrapModel::harmonic([2e4; 3]), SamplingMode::ClassicalBoltzmann);
        let mut atoms = sample_atoms(&src, 20_000, 2).unwrap();
        assign_spins(&mut atoms, &SpinPreparation::Unpolarized, 4).unwrap();
        let n92 = atoms.iter().filter(|a| a.m_f.abs() == 4.5).count() as f64 / 20_000.0;
        assert!((n92 - 0.2).abs() < 0.015);
        assign_spins(&mut atoms, &SpinPreparation::Stretched, 4).unwrap();
        assert!(atoms.iter().all(|a| a.m_f == 4.5));
    }
}
