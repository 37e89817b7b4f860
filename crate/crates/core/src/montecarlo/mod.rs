//! Classical atom ensembles: thermal sampling, Newtonian trajectories in the
//! dipole potentials, photon-recoil random walks during imaging, and
//! release-recapture thermometry.
//!
//! All randomness is drawn from per-atom streams (see [`crate::rng`]) so
//! ensembles are reproducible regardless of how the work is scheduled.

mod fluorescence;
mod recapture;
mod sampling;
mod sequence;
mod trajectory;

pub use fluorescence::{
    fluorescence_walk, EmissionEvent, EmissionPattern, FluorescenceResult, ImagingParams,
};
pub use recapture::{fit_temperature, release_recapture, RecapturePoint, RecaptureSetup, TemperatureFit};
pub use sampling::{assign_spins, sample_atoms, SamplingMode, SpinPreparation, ThermalSource, TrapModel};
pub use sequence::{osg_sequence, OsgSequence};
pub use trajectory::{integrate_trajectory, total_energy};

use nalgebra::Vector3;

/// Classical phase-space point of one atom with its spin label.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomSample {
    /// m.
    pub position: Vector3<f64>,
    /// m/s.
    pub velocity: Vector3<f64>,
    /// Magnetic quantum number, −F…F.
    pub m_f: f64,
    /// False once the atom is lost (dark state, not recaptured).
    pub alive: bool,
}

impl AtomSample {
    pub fn at_rest(position: Vector3<f64>, m_f: f64) -> Self {
        AtomSample { position, velocity: Vector3::zeros(), m_f, alive: true }
    }
}

pub const TRAJECTORY_CSV_SCHEMA: &str = "# schema: osg-trajectory-endpoints v1";
pub const EMISSION_CSV_SCHEMA: &str = "# schema: osg-emission-events v1";

/// Trajectory endpoints as CSV (schema line, header, one row per atom).
pub fn atoms_to_csv(atoms: &[AtomSample]) -> String {
    let mut out = String::new();
    out.push_str(TRAJECTORY_CSV_SCHEMA);
    out.push('\n');
    out.push_str("index,x_m,y_m,z_m,vx_m_s,vy_m_s,vz_m_s,m_f,alive\n");
    for (i, a) in atoms.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:e},{:e},{:e},{:e},{:e},{:e},{},{}\n",
            a.position.x, a.position.y, a.position.z, a.velocity.x, a.velocity.y, a.velocity.z, a.m_f, a.alive as u8
        ));
    }
    out
}

/// Emission events of one or more shots as CSV.
pub fn events_to_csv(shots: &[(usize, &[EmissionEvent])]) -> String {
    let mut out = String::new();
    out.push_str(EMISSION_CSV_SCHEMA);
    out.push('\n');
    out.push_str("shot,t_s,x_m,y_m,collected\n");
    for (shot, events) in shots {
        for e in events.iter() {
            out.push_str(&format!("{shot},{:e},{:e},{:e},{}\n", e.time, e.position[0], e.position[1], e.collected as u8));
        }
    }
    out
}
