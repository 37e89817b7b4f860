use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::sampling::unit_vector;
use super::AtomSample;
use crate::constants::{PLANCK, SR87_MASS};
use crate::error::{Error, Result};
use crate::optics::Potential;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionPattern {
    Isotropic,
    /// Dipole radiation pattern `∝ sin²θ` about the given polarization axis.
    Dipole([f64; 3]),
}

impl EmissionPattern {
    /// Mean of `uᵢ²` over emitted directions, per lab axis. The velocity
    /// variance from emission after `N` events is `N·v_rec²·c_geom[i]`.
    pub fn variance_coefficients(&self) -> [f64; 3] {
        match self {
            EmissionPattern::Isotropic => [1.0 / 3.0; 3],
            EmissionPattern::Dipole(p) => {
                let p = Vector3::from(*p).normalize();
                // ⟨uᵢ²⟩ = (2 − pᵢ²)/5 for a sin²θ pattern
                [0, 1, 2].map(|i| (2.0 - p[i] * p[i]) / 5.0)
            }
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        match self {
            EmissionPattern::Isotropic => unit_vector(rng),
            EmissionPattern::Dipole(p) => {
                let p = Vector3::from(*p).normalize();
                loop {
                    let u = unit_vector(rng);
                    let s2 = 1.0 - u.dot(&p).powi(2);
                    if rng.random::<f64>() < s2 {
                        return u;
                    }
                }
            }
        }
    }
}

/// Fluorescence imaging with two counter-propagating beams that alternate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImagingParams {
    /// Exposure, s.
    pub duration: f64,
    /// `I/I_sat` of the active beam.
    pub saturation: f64,
    /// Natural linewidth Γ, rad/s.
    pub linewidth: f64,
    /// m.
    pub wavelength: f64,
    /// Propagation axis of the first beam; the second runs opposite.
    pub beam_axis: [f64; 3],
    /// Each beam is on for this long in turn, s.
    pub alternation_period: f64,
    /// Fraction of the first beam's period already elapsed at `t = 0`. At
    /// 0.5 the first pulse is half length and the absorbed momentum averages
    /// to zero; at 0 the atom drifts along the first beam.
    pub alternation_start: f64,
    /// Probability per scattering event of decaying to the dark state.
    pub dark_branching: f64,
    /// Probability that an emitted photon reaches the camera
    /// (solid angle × optical transmission; quantum efficiency is applied by
    /// the camera).
    pub collection_efficiency: f64,
    pub emission_pattern: EmissionPattern,
}

impl ImagingParams {
    /// Scattering rate of the active beam, `(Γ/2)·s/(1+s)`.
    pub fn scattering_rate(&self) -> f64 {
        0.5 * self.linewidth * self.saturation / (1.0 + self.saturation)
    }

    pub fn recoil_velocity(&self) -> f64 {
        PLANCK / (SR87_MASS * self.wavelength)
    }

    /// Fraction of the full sphere inside a cone of numerical aperture `na`.
    pub fn solid_angle_fraction(na: f64) -> f64 {
        (1.0 - (1.0 - na * na).sqrt()) / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("imaging duration must be positive"));
        }
        let probs = [self.dark_branching, self.collection_efficiency];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("branching ratio and collection efficiency must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.alternation_start) {
            return Err(Error::invalid("alternation_start must lie in [0, 1)"));
        }
        if !(self.saturation >= 0.0 && self.linewidth > 0.0 && self.alternation_period > 0.0 && self.wavelength > 0.0) {
            return Err(Error::invalid("imaging beam parameters must be positive"));
        }
        Ok(())
    }
}

/// One scattered photon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionEvent {
    /// Since the start of the exposure, s.
    pub time: f64,
    /// Atom position in the object plane at emission, m.
    pub position: [f64; 2],
    pub collected: bool,
}

#[derive(Clone, Debug)]
pub struct FluorescenceResult {
    /// Time-ordered.
    pub events: Vec<EmissionEvent>,
    pub survived: bool,
    /// Atom at the end of the exposure (or at the moment it went dark).
    pub atom: AtomSample,
}

impl FluorescenceResult {
    pub fn collected(&self) -> impl Iterator<Item = &EmissionEvent> {
        self.events.iter().filter(|e| e.collected)
    }
}

/// Photon-recoil random walk during an exposure.
///
/// Scattering is a Poisson process at the saturated rate. Each event absorbs
/// one recoil along the beam active at that instant and emits one in a
/// random direction. With probability `dark_branching` the excitation decays
/// to the dark state instead; no photon is emitted and the atom stops
/// scattering. Between events the atom moves under `fields` (velocity Verlet).
pub fn fluorescence_walk<R: Rng + ?Sized>(
    atom: &AtomSample,
    imaging: &ImagingParams,
    fields: &[&dyn Potential],
    rng: &mut R,
) -> Result<FluorescenceResult> {
    imaging.validate()?;
    let rate = imaging.scattering_rate();
    let v_rec = imaging.recoil_velocity();
    let axis = Vector3::from(imaging.beam_axis).normalize();
    let mut state = atom.clone();
    let mut events = Vec::with_capacity((rate * imaging.duration * 1.2) as usize + 8);
    if !atom.alive || rate == 0.0 {
        return Ok(FluorescenceResult { events, survived: atom.alive, atom: state });
    }
    let wait = Exp::new(rate).map_err(|e| Error::invalid(format!("scattering rate: {e}")))?;
    let mut t = 0.0;
    let mut survived = true;
    loop {
        let step = wait.sample(rng);
        let t_next = (t + step).min(imaging.duration);
        drift(&mut state, fields, t_next - t);
        t = t_next;
        if t >= imaging.duration {
            break;
        }
        if rng.random::<f64>() < imaging.dark_branching {
            survived = false;
            state.alive = false;
            break;
        }
        let phase = (t / imaging.alternation_period + imaging.alternation_start).floor() as i64;
        let k = if phase % 2 == 0 { axis } else { -axis };
        state.velocity += (k + imaging.emission_pattern.sample(rng)) * v_rec;
        let collected = rng.random::<f64>() < imaging.collection_efficiency;
        events.push(EmissionEvent { time: t, position: [state.position.x, state.position.y], collected });
    }
    Ok(FluorescenceResult { events, survived, atom: state })
}

fn drift(atom: &mut AtomSample, fields: &[&dyn Potential], h: f64) {
    if h <= 0.0 {
        return;
    }
    if fields.is_empty() {
        atom.position += atom.velocity * h;
        return;
    }
    let acc = |r: &Vector3<f64>| fields.iter().fold(Vector3::zeros(), |a, f| a + f.force(r, atom.m_f)) / SR87_MASS;
    let a0 = acc(&atom.position);
    let half = atom.velocity + a0 * (0.5 * h);
    atom.position += half * h;
    let a1 = acc(&atom.position);
    atom.velocity = half + a1 * (0.5 * h);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{BLUE_LINEWIDTH, BLUE_WAVELENGTH};
    use crate::rng::{domain, stream};

    fn params(duration: f64) -> ImagingParams {
        ImagingParams {
            duration,
            saturation: 20.0,
            linewidth: BLUE_LINEWIDTH,
            wavelength: BLUE_WAVELENGTH,
            beam_axis: [1.0, 0.0, 0.0],
            alternation_period: 500e-9,
            alternation_start: 0.5,
            dark_branching: 0.0,
            collection_efficiency: ImagingParams::solid_angle_fraction(0.55) * 0.5,
            emission_pattern: EmissionPattern::Isotropic,
        }
    }

    #[test]
    fn mean_photon_number_and_collection() {
        let p = params(15e-6);
        let expected = p.scattering_rate() * 15e-6;
        assert!((expected - 1370.0).abs() < 5.0, "{expected}");
        assert!((ImagingParams::solid_angle_fraction(0.55) - 0.0824).abs() < 5e-4);
        let atom = AtomSample::at_rest(Vector3::zeros(), 4.5);
        let n = 400;
        let (mut total, mut collected) = (0usize, 0usize);
        for i in 0..n {
            let mut rng = stream(5, domain::FLUORESCENCE, i);
            let res = fluorescence_walk(&atom, &p, &[], &mut rng).unwrap();
            assert!(res.survived);
            assert!(res.events.windows(2).all(|w| w[0].time <= w[1].time));
            total += res.events.len();
            collected += res.collected().count();
        }
        let mean = total as f64 / n as f64;
        assert!((mean / expected - 1.0).abs() < 0.01, "{mean}");
        // with QE 0.8 on the camera: ≈ 3 % overall, a few dozen photoelectrons
        let pe = collected as f64 / n as f64 * 0.8;
        assert!((35.0..55.0).contains(&pe), "{pe}");
    }

    #[test]
    fn dark_state_decay_stops_scattering() {
        let mut p = params(15e-6);
        p.dark_branching = 0.01;
        let atom = AtomSample::at_rest(Vector3::zeros(), 4.5);
        let mut lost = 0;
        for i in 0..200 {
            let mut rng = stream(6, domain::FLUORESCENCE, i);
            let res = fluorescence_walk(&atom, &p, &[], &mut rng).unwrap();
            if !res.survived {
                lost += 1;
                assert!(!res.atom.alive);
            }
        }
        // P(survive 1370 events) = 0.99^1370 ≈ 1e-6
        assert_eq!(lost, 200);
    }

    #[test]
    fn dipole_coefficients_sum_to_one() {
        let c = EmissionPattern::Dipole([0.0, 1.0, 0.0]).variance_coefficients();
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((c[1] - 0.2).abs() < 1e-15);
    }
}
