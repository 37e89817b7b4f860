use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use super::sampling::unit_vector;
use super::{integrate_trajectory, AtomSample};
use crate::constants::{PLANCK, SR87_MASS};
use crate::error::{Error, Result};
use crate::optics::{DipoleTrap, OsgPotential, Potential};
use crate::rng::{domain, stream};

/// Stern-Gerlach separation: tweezer released, spin-dependent pulse with the
/// light sheet on, then in-plane expansion in the light sheet alone.
#[derive(Clone, Debug)]
pub struct OsgSequence {
    pub osg: OsgPotential,
    pub lightsheet: DipoleTrap,
    /// s.
    pub pulse_time: f64,
    /// s.
    pub expansion_time: f64,
    pub dt_pulse: f64,
    pub dt_expansion: f64,
    /// Spontaneous scattering rate during the pulse, 1/s (0 disables).
    pub scatter_rate: f64,
    /// Wavelength of the scattered light, m.
    pub scatter_wavelength: f64,
    pub seed: u64,
}

impl OsgSequence {
    fn pulse(&self, atom: &AtomSample, index: u64) -> Result<AtomSample> {
        let fields: [&dyn Potential; 2] = [&self.osg, &self.lightsheet];
        if self.scatter_rate <= 0.0 || self.pulse_time == 0.0 {
            return integrate_trajectory(atom, &fields, self.pulse_time, self.dt_pulse);
        }
        let mut rng = stream(self.seed, domain::OSG_RECOIL, index);
        let mean = self.scatter_rate * self.pulse_time;
        let k = Poisson::new(mean).map_err(|e| Error::invalid(format!("scatter rate: {e}")))?.sample(&mut rng) as usize;
        let mut times: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..self.pulse_time)).collect();
        times.sort_by(f64::total_cmp);
        times.push(self.pulse_time);
        let v_rec = PLANCK / (SR87_MASS * self.scatter_wavelength);
        let mut now = 0.0;
        let mut state = atom.clone();
        for (i, &t) in times.iter().enumerate() {
            state = integrate_trajectory(&state, &fields, t - now, self.dt_pulse)?;
            now = t;
            if i < k {
                // absorption direction is not modelled: two random recoils
                state.velocity += (unit_vector(&mut rng) + unit_vector(&mut rng)) * v_rec;
            }
        }
        Ok(state)
    }
}

/// Runs the separation sequence on every atom (order preserved).
pub fn osg_sequence(atoms: &[AtomSample], seq: &OsgSequence) -> Result<Vec<AtomSample>> {
    atoms
        .par_iter()
        .enumerate()
        .map(|(i, atom)| {
            let kicked = seq.pulse(atom, i as u64)?;
            let fields: [&dyn Potential; 1] = [&seq.lightsheet];
            integrate_trajectory(&kicked, &fields, seq.expansion_time, seq.dt_expansion)
        })
        .collect()
}
